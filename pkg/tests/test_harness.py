import json

import numpy as np
import pytest

from gossipvr.harness import (
    ExperimentConfig,
    parse_libsvm,
    partition_dataset,
    reference_solution,
    run_experiment,
    serialize_libsvm,
    main,
)
from gossipvr.hardinstances import strongly_convex_chain
from gossipvr.objectives import SmoothnessInfo, CallableFiniteSum, logistic_objective

from test_objectives import make_shards


class TestParseLibsvm:
    def test_basic_line(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("+1 1:0.5 3:2\n")
        rows = parse_libsvm(f)
        assert rows[0][1] == 1.0
        assert rows[0][0] == pytest.approx([0.5, 0.0, 2.0])

    def test_label_only_line(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("+1 2:1\n-1\n")
        rows = parse_libsvm(f)
        assert rows[1][1] == -1.0
        assert rows[1][0] == pytest.approx([0.0, 0.0])

    def test_zero_index_rejected(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("1 0:3\n")
        with pytest.raises(ValueError, match=">= 1"):
            parse_libsvm(f)

    def test_malformed_pair_reports_line(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("1 1:1\n1 2;3\n")
        with pytest.raises(ValueError, match=":2"):
            parse_libsvm(f)

    def test_binary_01_labels_remapped(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("0 1:1\n1 1:2\n")
        rows = parse_libsvm(f)
        assert sorted(label for _, label in rows) == [-1.0, 1.0]

    def test_feature_cap(self, tmp_path):
        f = tmp_path / "toy.libsvm"
        f.write_text("1 900000:1\n")
        with pytest.raises(ValueError, match="cap"):
            parse_libsvm(f)
        assert parse_libsvm(f, max_features=10**6)[0][0].shape == (900000,)

    def test_round_trip(self, tmp_path, fixture_path):
        rows = parse_libsvm(fixture_path)
        out = tmp_path / "echo.libsvm"
        serialize_libsvm(rows, out)
        again = parse_libsvm(out)
        assert len(again) == len(rows)
        for (va, la), (vb, lb) in zip(rows, again):
            assert la == lb
            assert np.array_equal(va, vb)

    def test_fixture_shape(self, fixture_path):
        rows = parse_libsvm(fixture_path)
        assert len(rows) == 500
        assert rows[0][0].shape == (20,)


class TestPartition:
    def make_rows(self, count, d=3):
        return [(np.full(d, float(r)), 1.0) for r in range(count)]

    def test_even_split(self):
        shards = partition_dataset(self.make_rows(6), m=2, n=3, seed=0)
        assert [s.features.shape[0] for s in shards] == [3, 3]
        for s in shards:
            assert [rows.size for rows in s.block_rows] == [1, 1, 1]

    def test_remainder_spread_from_node_zero(self):
        shards = partition_dataset(self.make_rows(7), m=2, n=3, seed=0, allow_empty=True)
        assert [s.features.shape[0] for s in shards] == [4, 3]

    def test_deterministic(self):
        a = partition_dataset(self.make_rows(10), m=2, n=2, seed=5)
        b = partition_dataset(self.make_rows(10), m=2, n=2, seed=5)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.features, sb.features)

    def test_too_few_rows_errors(self):
        with pytest.raises(ValueError, match="components"):
            partition_dataset(self.make_rows(5), m=2, n=3, seed=0)

    def test_every_row_lands_in_one_block(self):
        shards = partition_dataset(self.make_rows(11), m=3, n=2, seed=1, allow_empty=True)
        for s in shards:
            seen = np.concatenate(s.block_rows)
            assert sorted(seen.tolist()) == list(range(s.features.shape[0]))


class TestReferenceSolution:
    def test_one_dimensional_quadratic(self):
        info = SmoothnessInfo(L=1.0, mu=1.0, L_ij=np.ones((1, 1)), Lhat=1.0)
        obj = CallableFiniteSum([[lambda w: (0.5 * (w[0] - 3.0) ** 2, np.array([w[0] - 3.0]))]], 1, info)
        ref = reference_solution(obj)
        assert ref.x_star[0] == pytest.approx(3.0, abs=1e-12)

    def test_chain_matches_geometric_series(self):
        obj = strongly_convex_chain(4, 2, 4.0, 1.0, dim=12)
        ref = reference_solution(obj, tolerance=1e-13)
        target = obj.x_star()
        assert np.max(np.abs(ref.x_star - target)) < 1e-6

    def test_logistic_self_certifies(self):
        rng = np.random.default_rng(0)
        obj = logistic_objective(make_shards(rng, m=2, n=2, d=4), 0.1)
        ref = reference_solution(obj, tolerance=1e-11)
        assert ref.grad_norm < 1e-10

    def test_node_gradients_average_to_zero_at_solution(self):
        from gossipvr.objectives import full_gradient

        rng = np.random.default_rng(2)
        obj = logistic_objective(make_shards(rng, m=3, n=2, d=4), 0.2)
        ref = reference_solution(obj, tolerance=1e-12)
        stacked = full_gradient(obj, np.tile(ref.x_star, (obj.m, 1)))
        assert np.linalg.norm(stacked.mean(axis=0)) < 1e-10

    def test_nonconvex_requires_flag(self):
        rng = np.random.default_rng(1)
        from gossipvr.objectives import nlls_objective

        obj = nlls_objective(make_shards(rng, labels="real"), probe_pairs=50)
        with pytest.raises(ValueError, match="strongly convex"):
            reference_solution(obj)
        ref = reference_solution(obj, tolerance=1e-4, require_minimizer=False)
        assert ref.x_star is None
        assert np.isfinite(ref.f_star)


class TestExperimentConfig:
    def test_unknown_method_names_valid_values(self):
        cfg = ExperimentConfig(method="sgd")
        with pytest.raises(ValueError, match="adom_vr, gt_page, gt_baseline"):
            cfg.validate()

    def test_config_file_round_trip(self, tmp_path):
        f = tmp_path / "exp.cfg"
        f.write_text("method=gt_page\nm=4\nradius=0.5\n# comment\n\nseed=3\n")
        cfg = ExperimentConfig.from_file(f)
        assert cfg.method == "gt_page"
        assert cfg.m == 4
        assert cfg.radius == 0.5
        assert cfg.seed == 3

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "exp.cfg"
        f.write_text("momentum=0.9\n")
        with pytest.raises(ValueError, match="unknown config key"):
            ExperimentConfig.from_file(f)


class TestRunExperiment:
    def small_cfg(self, tmp_path, fixture_path, **kw):
        base = dict(
            method="adom_vr",
            objective="chain",
            topology="static-ring",
            m=4,
            n=2,
            budget_iters=5,
            metric_every=1,
            out=str(tmp_path / "runs"),
            seed=1,
        )
        base.update(kw)
        if base["objective"] in ("logistic", "nlls"):
            base["dataset"] = str(fixture_path)
        return ExperimentConfig().replace(**base)

    def test_chain_run_writes_csv_and_meta(self, tmp_path, fixture_path):
        cfg = self.small_cfg(tmp_path, fixture_path)
        trace, csv_path, meta_path = run_experiment(cfg)
        text = csv_path.read_text().splitlines()
        assert text[0] == "iter,comms,oracle_calls,dist_sq,grad_norm_sq,consensus_err"
        assert len(text) >= 2
        meta = json.loads(meta_path.read_text())
        assert meta["config"]["method"] == "adom_vr"
        assert meta["chi"] >= 1.0
        assert "tau2" in meta["parameters"]

    def test_graph_dump_written_and_parseable(self, tmp_path, fixture_path):
        from gossipvr.network import parse_sequence_dump

        cfg = self.small_cfg(tmp_path, fixture_path)
        trace, csv_path, _ = run_experiment(cfg)
        dump = csv_path.with_suffix(".graphs")
        graphs = parse_sequence_dump(dump.read_text().splitlines())
        assert len(graphs) == trace.final().comms
        assert all(g.m == cfg.m for g in graphs)

    def test_missing_dataset_rejected_at_validate(self, tmp_path):
        cfg = ExperimentConfig().replace(objective="logistic", dataset=str(tmp_path / "nope.libsvm"))
        with pytest.raises(ValueError, match="not found"):
            cfg.validate()

    def test_rerun_is_byte_identical(self, tmp_path, fixture_path):
        cfg = self.small_cfg(tmp_path, fixture_path, objective="logistic", m=3, n=3, budget_iters=20)
        _, csv1, _ = run_experiment(cfg)
        first = csv1.read_bytes()
        _, csv2, _ = run_experiment(cfg)
        assert csv2.read_bytes() == first

    def test_counters_monotone_in_csv(self, tmp_path, fixture_path):
        cfg = self.small_cfg(tmp_path, fixture_path, method="gt_page", objective="nlls", m=3, n=3, budget_iters=30)
        _, csv_path, _ = run_experiment(cfg)
        rows = [line.split(",") for line in csv_path.read_text().splitlines()[1:]]
        comms = [int(r[1]) for r in rows]
        oracle = [int(r[2]) for r in rows]
        assert comms == sorted(comms)
        assert oracle == sorted(oracle)

    def test_nan_dist_for_nonconvex(self, tmp_path, fixture_path):
        cfg = self.small_cfg(tmp_path, fixture_path, method="gt_page", objective="nlls", m=3, n=3, budget_iters=5)
        _, csv_path, _ = run_experiment(cfg)
        first_row = csv_path.read_text().splitlines()[1].split(",")
        assert first_row[3] == "NaN"

    def test_zero_chain_run_respects_topology_override(self, tmp_path, fixture_path):
        cfg = self.small_cfg(
            tmp_path, fixture_path, method="gt_baseline", objective="zero_chain",
            m=6, n=2, budget_iters=8, budget_comms=24, budget_oracle=64,
        )
        trace, csv_path, meta_path = run_experiment(cfg)
        assert csv_path.exists()

    def test_gt_baseline_on_chain(self, tmp_path, fixture_path):
        cfg = self.small_cfg(tmp_path, fixture_path, method="gt_baseline", budget_iters=10)
        trace, _, _ = run_experiment(cfg)
        assert trace.final().iteration == 10


class TestCli:
    def test_unknown_method_rejected_naming_choices(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["--method", "adam"])
        assert exc_info.value.code != 0
        assert "adom_vr" in capsys.readouterr().err

    def test_unknown_method_via_config_file(self, tmp_path, capsys):
        f = tmp_path / "exp.cfg"
        f.write_text("method=adam\nobjective=chain\n")
        code = main(["--config", str(f)])
        assert code == 1
        assert "adom_vr" in capsys.readouterr().err

    def test_cli_end_to_end(self, tmp_path, fixture_path, capsys):
        code = main(
            [
                "--method", "adom_vr",
                "--objective", "chain",
                "--topology", "static-ring",
                "--m", "4",
                "--n", "2",
                "--budget-iters", "5",
                "--out", str(tmp_path / "cli_runs"),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "iters=5" in out
        assert (tmp_path / "cli_runs").exists()

    def test_cli_error_is_structured(self, tmp_path, capsys):
        code = main(["--objective", "logistic", "--dataset", str(tmp_path / "missing.libsvm")])
        assert code == 1
        err = capsys.readouterr().err
        payload = json.loads(err)
        assert "error" in payload

    def test_seed_sweep(self, tmp_path, fixture_path, capsys):
        code = main(
            [
                "--method", "gt_baseline",
                "--objective", "chain",
                "--topology", "static-ring",
                "--m", "4",
                "--n", "2",
                "--budget-iters", "3",
                "--seeds", "1,2",
                "--out", str(tmp_path / "sweep"),
            ]
        )
        assert code == 0
        assert len(list((tmp_path / "sweep").glob("*.csv"))) == 2

    def test_seed_sweep_parallel_jobs(self, tmp_path, fixture_path):
        args = [
            "--method", "gt_baseline",
            "--objective", "chain",
            "--topology", "static-ring",
            "--m", "4",
            "--n", "2",
            "--budget-iters", "3",
            "--seeds", "5,6",
        ]
        assert main(args + ["--out", str(tmp_path / "serial")]) == 0
        assert main(args + ["--jobs", "2", "--out", str(tmp_path / "par")]) == 0
        for name in ("gt_baseline_chain_static-ring_m4_n2_seed5.csv", "gt_baseline_chain_static-ring_m4_n2_seed6.csv"):
            assert (tmp_path / "par" / name).read_bytes() == (tmp_path / "serial" / name).read_bytes()

    def test_fresh_process_determinism(self, tmp_path, fixture_path):
        import subprocess
        import sys

        args = [
            sys.executable, "-m", "gossipvr",
            "--method", "gt_page", "--objective", "nlls",
            "--dataset", str(fixture_path),
            "--topology", "static-star", "--m", "3", "--n", "3",
            "--budget-iters", "15", "--seed", "2",
        ]
        outs = []
        for run_dir in ("proc_a", "proc_b"):
            proc = subprocess.run(args + ["--out", str(tmp_path / run_dir)], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            (csv_file,) = (tmp_path / run_dir).glob("*.csv")
            outs.append(csv_file.read_bytes())
        assert outs[0] == outs[1]
