"""Experiment harness: data ingestion, reference solutions, CLI.

Runs are described by a flat key=value config (overridable from the command
line), wire a topology, an objective and an optimizer together, and write a
CSV trace plus a JSON metadata sidecar.  Reruns with the same config and seed
produce byte-identical CSV output.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .hardinstances import ProgressTracker, nonconvex_hard_objective, strongly_convex_chain
from .network import (
    GraphSequence,
    RandomGeometricSequence,
    RotatingStarSequence,
    StaticSequence,
    TwoStarHopSequence,
    complete_graph,
    dump_sequence,
    measure_chi,
    path_graph,
    ring_graph,
    star_graph,
)
from .objectives import DatasetShard, FiniteSumObjective, logistic_objective, nlls_objective
from .optimizers import (
    AdomVr,
    GtBaseline,
    GtPage,
    RunBudgets,
    RunTrace,
    adom_vr_params,
    corollary_batch_size,
    gt_page_params,
    run,
)

__all__ = [
    "parse_libsvm",
    "serialize_libsvm",
    "partition_dataset",
    "reference_solution",
    "ReferenceSolution",
    "ExperimentConfig",
    "run_experiment",
    "main",
    "CSV_HEADER",
]

CSV_HEADER = "iter,comms,oracle_calls,dist_sq,grad_norm_sq,consensus_err"

METHODS = ("adom_vr", "gt_page", "gt_baseline")
OBJECTIVES = ("logistic", "nlls", "chain", "zero_chain")
TOPOLOGIES = (
    "random-geometric",
    "two-star-hop",
    "rotating-star",
    "static-complete",
    "static-star",
    "static-ring",
    "static-path",
)


# ---------------------------------------------------------------------------
# Data ingestion
# ---------------------------------------------------------------------------


def parse_libsvm(path: str | Path, max_features: int = 100_000) -> list[tuple[np.ndarray, float]]:
    """Parse a sparse `label idx:val ...` file into dense rows.

    Indices are 1-based; the dense dimension is the maximum index seen, capped
    at ``max_features`` (rows are densified, so an unexpectedly huge index
    must fail rather than allocate).  Binary {0, 1} label sets are remapped to
    {-1, +1}.
    """
    raw: list[tuple[float, list[tuple[int, float]]]] = []
    max_idx = 0
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            pairs = []
            for token in parts[1:]:
                if ":" not in token:
                    raise ValueError(f"{path}:{lineno}: malformed pair {token!r}")
                idx_s, val_s = token.split(":", 1)
                try:
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric pair {token!r}") from None
                if idx < 1:
                    raise ValueError(f"{path}:{lineno}: index must be >= 1, got {idx}")
                if idx > max_features:
                    raise ValueError(f"{path}:{lineno}: feature index {idx} exceeds the cap {max_features}")
                pairs.append((idx, val))
                max_idx = max(max_idx, idx)
            raw.append((label, pairs))
    if not raw:
        raise ValueError(f"{path}: no data rows")
    labels = {lab for lab, _ in raw}
    remap = labels == {0.0, 1.0}
    rows = []
    for label, pairs in raw:
        vec = np.zeros(max_idx)
        for idx, val in pairs:
            vec[idx - 1] = val
        if remap and label == 0.0:
            label = -1.0
        rows.append((vec, label))
    return rows


def serialize_libsvm(rows: list[tuple[np.ndarray, float]], path: str | Path) -> None:
    with open(path, "w") as handle:
        for vec, label in rows:
            feats = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(vec) if v != 0.0)
            handle.write(f"{float(label)!r} {feats}".rstrip() + "\n")


def partition_dataset(rows: list[tuple[np.ndarray, float]], m: int, n: int, seed: int, allow_empty: bool = False) -> list[DatasetShard]:
    """Shuffle rows, split contiguously across nodes, round-robin into components.

    The remainder after equal division goes one row per node starting at node
    0.  With fewer than ``m * n`` rows some component would be empty, which is
    an error unless explicitly allowed.
    """
    if len(rows) < m * n:
        if not allow_empty:
            raise ValueError(f"{len(rows)} rows cannot fill {m} nodes x {n} components; pass allow_empty to override")
        warnings.warn(f"only {len(rows)} rows for {m}x{n} blocks: some components will be empty", stacklevel=2)
    order = np.random.default_rng(seed).permutation(len(rows))
    base, extra = divmod(len(rows), m)
    shards = []
    cursor = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        picked = order[cursor : cursor + size]
        cursor += size
        feats = np.stack([rows[r][0] for r in picked])
        labels = np.array([rows[r][1] for r in picked])
        blocks = tuple(np.arange(j, size, n) for j in range(n))
        shards.append(DatasetShard(node=i, features=feats, labels=labels, block_rows=blocks))
    return shards


# ---------------------------------------------------------------------------
# Reference solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceSolution:
    x_star: np.ndarray | None
    f_star: float
    grad_norm: float
    iterations: int


def reference_solution(
    obj: FiniteSumObjective,
    tolerance: float = 1e-12,
    require_minimizer: bool = True,
    max_iterations: int = 10_000_000,
) -> ReferenceSolution:
    """Accelerated full-gradient solve of the averaged objective.

    Stops when the gradient norm falls below ``tolerance * max(1, |grad at
    0|)``.  A certified minimizer requires strong convexity; without it only
    the best value found is returned (``x_star`` is None unless
    ``require_minimizer`` is disabled by the caller).
    """
    mu, L = obj.info.mu, obj.info.L
    if require_minimizer and mu <= 0:
        raise ValueError("a certified minimizer needs a strongly convex objective (mu > 0)")
    w = np.zeros(obj.d)
    g0 = obj.average_gradient(w)
    target = tolerance * max(1.0, float(np.linalg.norm(g0)))
    momentum = 0.0
    if mu > 0:
        kappa = L / mu
        momentum = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    step = 1.0 / L
    prev = w.copy()
    best_val = obj.average_value(w)
    grad = g0
    k = 0
    while float(np.linalg.norm(grad)) > target:
        if k >= max_iterations:
            raise RuntimeError(f"reference solve exceeded {max_iterations} iterations (|grad| = {np.linalg.norm(grad):.3e})")
        look = w + momentum * (w - prev)
        g_look = obj.average_gradient(look)
        prev, w = w, look - step * g_look
        val = obj.average_value(w)
        if val > best_val + 1e-12 * max(1.0, abs(best_val)):
            prev = w.copy()  # restart momentum on non-monotone progress
        best_val = min(best_val, val)
        grad = obj.average_gradient(w)
        k += 1
    return ReferenceSolution(
        x_star=w if mu > 0 else None,
        f_star=float(min(best_val, obj.average_value(w))),
        grad_norm=float(np.linalg.norm(grad)),
        iterations=k,
    )


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    method: str = "adom_vr"
    objective: str = "logistic"
    topology: str = "random-geometric"
    dataset: str = ""
    m: int = 10
    n: int = 10
    b: int = 0  # 0: schedule default
    seed: int = 0
    reg: float = 0.1
    radius: float = 0.7
    budget_iters: int = 1000
    budget_comms: int = 0  # 0: unlimited
    budget_oracle: int = 0  # 0: unlimited
    metric_every: int = 10
    out: str = "runs"
    chi_trials: int = 20
    gt_eta: float = 0.0  # 0: derived from the spectral gap
    chain_L: float = 4.0
    chain_mu: float = 1.0
    chain_dim: int = 12
    zc_L: float = 1.0
    zc_delta: float = 1.0
    stop_dist_sq: float = 0.0  # 0: disabled
    strict_step: int = 0
    per_node_coins: int = 0
    lazy_omega: int = 0
    ref_tolerance: float = 1e-12

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; valid: {', '.join(TOPOLOGIES)}")
        if self.objective in ("logistic", "nlls"):
            if not self.dataset:
                raise ValueError(f"objective {self.objective!r} needs --dataset")
            if not Path(self.dataset).exists():
                raise ValueError(f"dataset file not found: {self.dataset}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        values: dict[str, str] = {}
        with open(path) as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
        return cls().replace(**values)

    def replace(self, **overrides) -> "ExperimentConfig":
        current = asdict(self)
        types = {f.name: f.type for f in fields(self)}
        for key, val in overrides.items():
            if key not in current:
                raise ValueError(f"unknown config key {key!r}")
            if val is None:
                continue
            kind = types[key]
            if kind == "int":
                current[key] = int(val)
            elif kind == "float":
                current[key] = float(val)
            else:
                current[key] = str(val)
        return ExperimentConfig(**current)

    def tag(self) -> str:
        return f"{self.method}_{self.objective}_{self.topology}_m{self.m}_n{self.n}_seed{self.seed}"


def _build_sequence(cfg: ExperimentConfig) -> GraphSequence:
    if cfg.topology == "random-geometric":
        return RandomGeometricSequence(cfg.m, cfg.radius, seed=cfg.seed + 104729)
    if cfg.topology == "two-star-hop":
        return TwoStarHopSequence(cfg.m)
    if cfg.topology == "rotating-star":
        return RotatingStarSequence(cfg.m)
    maker = {
        "static-complete": complete_graph,
        "static-star": star_graph,
        "static-ring": ring_graph,
        "static-path": path_graph,
    }[cfg.topology]
    return StaticSequence(maker(cfg.m))


def _build_objective(cfg: ExperimentConfig, seq: GraphSequence):
    """Returns (objective, graph sequence); the hard instance overrides the topology."""
    if cfg.objective == "logistic":
        rows = parse_libsvm(cfg.dataset)
        return logistic_objective(partition_dataset(rows, cfg.m, cfg.n, cfg.seed), cfg.reg), seq
    if cfg.objective == "nlls":
        rows = parse_libsvm(cfg.dataset)
        return nlls_objective(partition_dataset(rows, cfg.m, cfg.n, cfg.seed)), seq
    if cfg.objective == "chain":
        return strongly_convex_chain(cfg.m, cfg.n, cfg.chain_L, cfg.chain_mu, cfg.chain_dim), seq
    comms = cfg.budget_comms or 4 * cfg.budget_iters
    oracle = cfg.budget_oracle or max(cfg.n, cfg.budget_iters * cfg.n)
    obj, hard_seq = nonconvex_hard_objective(cfg.m, cfg.n, cfg.zc_L, cfg.zc_delta, comms, oracle)
    return obj, hard_seq


def _format_metric(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    return f"{v:.17g}"


def write_trace_csv(trace: RunTrace, path: Path) -> None:
    lines = [CSV_HEADER]
    for r in trace.records:
        lines.append(
            f"{r.iteration},{r.comms},{r.oracle_calls},"
            f"{_format_metric(r.dist_sq)},{_format_metric(r.grad_norm_sq)},{_format_metric(r.consensus_err)}"
        )
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, progress_tracker: ProgressTracker | None = None):
    """Wire topology + objective + optimizer, run, and write trace artifacts.

    Returns ``(trace, csv_path, meta_path)``.
    """
    cfg.validate()
    seq = _build_sequence(cfg)
    obj, seq = _build_objective(cfg, seq)
    info = obj.info

    chi = seq.chi if seq.chi is not None else measure_chi(seq, trials=cfg.chi_trials, seed=cfg.seed + 7)

    x_star = None
    if info.mu > 0:
        ref = reference_solution(obj, tolerance=cfg.ref_tolerance)
        x_star = ref.x_star

    if cfg.method == "adom_vr":
        if info.mu <= 0:
            raise ValueError("adom_vr needs a strongly convex objective (mu > 0)")
        b = cfg.b or corollary_batch_size(info.mu, info.L, info.Lbar, obj.n)
        params = adom_vr_params(info.mu, info.L, info.Lbar, chi, obj.n, b)
        method = AdomVr(params, eager_omega_refresh=not cfg.lazy_omega)
    elif cfg.method == "gt_page":
        b = cfg.b or None
        params = gt_page_params(info.L, info.Lhat, chi, obj.n, b=b, strict_step=bool(cfg.strict_step))
        method = GtPage(params, per_node_coins=bool(cfg.per_node_coins))
    else:
        rho = 1.0 / chi
        eta = cfg.gt_eta or rho * rho / (4.0 * info.L)
        params = None
        method = GtBaseline(eta=eta)

    budgets = RunBudgets(
        max_iterations=cfg.budget_iters,
        max_communications=cfg.budget_comms or None,
        max_oracle_calls_per_node=cfg.budget_oracle or None,
    )
    trace = run(
        method,
        obj,
        seq,
        budgets,
        metric_every=cfg.metric_every,
        seed=cfg.seed,
        x_star=x_star,
        progress_tracker=progress_tracker,
        stop_dist_sq=cfg.stop_dist_sq or None,
    )

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{cfg.tag()}.csv"
    meta_path = out_dir / f"{cfg.tag()}.json"
    write_trace_csv(trace, csv_path)
    with open(out_dir / f"{cfg.tag()}.graphs", "w") as sink:
        dump_sequence(seq, min(trace.final().comms, 1000) or 1, sink)
    values = trace.column("avg_value")
    meta = {
        "config": asdict(cfg),
        "chi": chi,
        "constants": {
            "L": info.L,
            "mu": info.mu,
            "Lbar": info.Lbar,
            "Lhat": info.Lhat,
        },
        "parameters": asdict(params) if params is not None else {"eta": method.eta},
        "records": len(trace.records),
        "f_best_observed": float(values.min()),
        # Best-observed gap; a lower bound on the true initial suboptimality.
        "delta_observed": float(values[0] - values.min()),
        "final": {
            "iteration": trace.final().iteration,
            "comms": trace.final().comms,
            "oracle_calls": trace.final().oracle_calls,
        },
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")
    return trace, csv_path, meta_path


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gossipvr",
        description="Decentralized finite-sum optimization runs over time-varying gossip graphs",
    )
    parser.add_argument("--config", help="flat key=value config file; flags override it")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--objective", choices=OBJECTIVES)
    parser.add_argument("--topology", choices=TOPOLOGIES)
    parser.add_argument("--dataset", help="LibSVM text file for data-backed objectives")
    parser.add_argument("--m", type=int, help="node count")
    parser.add_argument("--n", type=int, help="components per node")
    parser.add_argument("--b", type=int, help="batch size (0 = schedule default)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--reg", type=float, help="l2 regularization for the logistic loss")
    parser.add_argument("--radius", type=float, help="random geometric connection radius")
    parser.add_argument("--budget-iters", dest="budget_iters", type=int)
    parser.add_argument("--budget-comms", dest="budget_comms", type=int)
    parser.add_argument("--budget-oracle", dest="budget_oracle", type=int)
    parser.add_argument("--metric-every", dest="metric_every", type=int)
    parser.add_argument("--out", help="output directory for trace CSV/JSON")
    parser.add_argument("--gt-eta", dest="gt_eta", type=float, help="baseline step size")
    parser.add_argument("--seeds", help="comma-separated seeds to run as separate experiments")
    parser.add_argument("--jobs", type=int, default=1, help="parallel processes when sweeping --seeds")
    return parser


def _run_one(cfg: ExperimentConfig) -> str:
    trace, csv_path, _ = run_experiment(cfg)
    final = trace.final()
    return f"{csv_path} iters={final.iteration} comms={final.comms} oracle={final.oracle_calls}"


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        overrides = {
            k: v
            for k, v in vars(args).items()
            if k not in ("config", "seeds", "jobs") and v is not None
        }
        cfg = cfg.replace(**overrides)
        if args.seeds:
            configs = [cfg.replace(seed=s) for s in args.seeds.split(",")]
        else:
            configs = [cfg]
        if args.jobs > 1 and len(configs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for line in pool.map(_run_one, configs):
                    print(line)
        else:
            for one in configs:
                print(_run_one(one))
    except Exception as exc:  # structured nonzero exit for any module error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
