"""Time-varying communication graphs and their gossip machinery.

A gossip matrix here is the normalized Laplacian ``W = L(G) / lambda_max(L(G))``
of a connected weighted graph: symmetric, zero row sums (the consensus vector
spans its kernel), and every nonzero off-diagonal entry sits on an edge.  On
the zero-sum subspace it contracts disagreement by a factor governed by the
condition-like parameter ``chi``; for a fixed graph ``chi`` equals the ratio
of the largest to the smallest positive Laplacian eigenvalue.

Node states are stacked as ``(m, d)`` arrays, one row per node ("node
vectors").  Mixing a node vector means multiplying by the gossip matrix on the
left; the averaging operator actually applied by optimizers is ``I - W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "WeightedGraph",
    "GossipMatrix",
    "GraphSequence",
    "StaticSequence",
    "RandomGeometricSequence",
    "TwoStarHopSequence",
    "RotatingStarSequence",
    "complete_graph",
    "star_graph",
    "ring_graph",
    "path_graph",
    "gossip_from_laplacian",
    "apply_mixing",
    "measure_chi",
    "random_geometric_sequence",
    "two_star_hop_sequence",
    "rotating_star_sequence",
    "multi_stage_mix",
    "chebyshev_mix",
    "node_mean",
    "consensus_error",
    "project_zero_mean",
    "dump_sequence",
    "parse_sequence_dump",
]

# Eigenvalues below this fraction of lambda_max count as the Laplacian kernel.
_KERNEL_CUTOFF = 1e-8


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph on nodes ``0..m-1`` without self-loops."""

    m: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"node count must be positive, got {self.m}")
        seen = set()
        canonical = []
        for i, j, w in self.edges:
            if i == j:
                raise ValueError(f"self-loop ({i},{i}) not allowed")
            if not (0 <= i < self.m and 0 <= j < self.m):
                raise ValueError(f"edge ({i},{j}) outside node range [0,{self.m})")
            if w <= 0:
                raise ValueError(f"edge ({i},{j}) has nonpositive weight {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            canonical.append((key[0], key[1], float(w)))
        object.__setattr__(self, "edges", tuple(sorted(canonical)))

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.m, self.m))
        for i, j, w in self.edges:
            lap[i, i] += w
            lap[j, j] += w
            lap[i, j] -= w
            lap[j, i] -= w
        return lap

    def edge_set(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.edges}

    def is_connected(self) -> bool:
        if self.m == 1:
            return True
        adj: list[list[int]] = [[] for _ in range(self.m)]
        for i, j, _ in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.m


@dataclass(frozen=True)
class GossipMatrix:
    """Normalized-Laplacian gossip matrix with its contraction certificate.

    ``chi`` is exact (the graph condition number) when built from a single
    graph via :func:`gossip_from_laplacian`; sequences may carry a measured
    bound instead.  ``lam_max`` and ``lam_min_pos`` are the extreme eigenvalues
    of the stored (already normalized) matrix, so ``lam_max == 1`` and
    ``lam_min_pos == 1/chi`` for spectral constructions.
    """

    matrix: np.ndarray
    chi: float
    lam_max: float = 1.0
    lam_min_pos: float = field(default=0.0)

    def __post_init__(self):
        if self.lam_min_pos == 0.0:
            object.__setattr__(self, "lam_min_pos", self.lam_max / self.chi)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


def complete_graph(m: int, weight: float = 1.0) -> WeightedGraph:
    return WeightedGraph(m, tuple((i, j, weight) for i in range(m) for j in range(i + 1, m)))


def star_graph(m: int, center: int = 0, weight: float = 1.0) -> WeightedGraph:
    return WeightedGraph(m, tuple((center, v, weight) for v in range(m) if v != center))


def ring_graph(m: int, weight: float = 1.0) -> WeightedGraph:
    if m == 2:
        return WeightedGraph(2, ((0, 1, weight),))
    return WeightedGraph(m, tuple((i, (i + 1) % m, weight) for i in range(m)))


def path_graph(m: int, weight: float = 1.0) -> WeightedGraph:
    return WeightedGraph(m, tuple((i, i + 1, weight) for i in range(m - 1)))


def gossip_from_laplacian(g: WeightedGraph) -> GossipMatrix:
    """Build ``W = L(g)/lambda_max(L(g))`` with its exact condition number.

    Requires a connected graph on at least two nodes; otherwise the smallest
    positive eigenvalue degenerates and chi is undefined.
    """
    if g.m < 2:
        raise ValueError("gossip matrix needs at least 2 nodes")
    if not g.is_connected():
        raise ValueError("graph is disconnected: chi would be infinite")
    lap = g.laplacian()
    eigs = np.linalg.eigvalsh(lap)
    lam_max = float(eigs[-1])
    positive = eigs[eigs > _KERNEL_CUTOFF * lam_max]
    lam_min_pos = float(positive[0])
    w = lap / lam_max
    w = 0.5 * (w + w.T)
    chi = lam_max / lam_min_pos
    return GossipMatrix(matrix=w, chi=chi, lam_max=1.0, lam_min_pos=lam_min_pos / lam_max)


def apply_mixing(w: GossipMatrix, x: np.ndarray) -> np.ndarray:
    """Apply ``(W otimes I_d)`` to a stacked node vector: row i gets sum_j W_ij x_j."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != w.m:
        raise ValueError(f"node vector shape {x.shape} does not match {w.m} nodes")
    return w.matrix @ x


def node_mean(x: np.ndarray) -> np.ndarray:
    return np.mean(x, axis=0)


def consensus_error(x: np.ndarray) -> float:
    """Total squared deviation of node blocks from their mean."""
    dev = x - node_mean(x)
    return float(np.sum(dev * dev))


def project_zero_mean(x: np.ndarray) -> np.ndarray:
    return x - node_mean(x)


class GraphSequence:
    """Base for per-step graph generators.

    Subclasses provide random access ``graph(k)``; gossip matrices are derived
    lazily and cached.  ``chi`` is an analytic or construction-time certificate
    when available, otherwise ``None`` (use :func:`measure_chi`).
    """

    kind: str = "static"
    m: int
    chi: float | None = None
    period: int | None = None

    def graph(self, k: int) -> WeightedGraph:
        raise NotImplementedError

    def gossip(self, k: int) -> GossipMatrix:
        raise NotImplementedError

    @property
    def is_static(self) -> bool:
        return self.kind == "static"


class StaticSequence(GraphSequence):
    """The same graph (and gossip matrix) at every step."""

    kind = "static"

    def __init__(self, graph: WeightedGraph):
        self.m = graph.m
        self._graph = graph
        self._gossip = gossip_from_laplacian(graph)
        self.chi = self._gossip.chi
        self.period = 1

    def graph(self, k: int) -> WeightedGraph:
        return self._graph

    def gossip(self, k: int) -> GossipMatrix:
        return self._gossip


class _CyclicSequence(GraphSequence):
    def __init__(self, graphs: Sequence[WeightedGraph]):
        self._graphs = list(graphs)
        self._gossips = [gossip_from_laplacian(g) for g in self._graphs]
        self.m = self._graphs[0].m
        self.period = len(self._graphs)

    def graph(self, k: int) -> WeightedGraph:
        return self._graphs[k % self.period]

    def gossip(self, k: int) -> GossipMatrix:
        return self._gossips[k % self.period]


class RandomGeometricSequence(GraphSequence):
    """Fresh random geometric graph each step, resampled until connected.

    Points are uniform in the unit square; pairs within ``radius`` are joined
    with unit weight.  Step ``k`` is a pure function of ``(seed, k)``, so runs
    can revisit steps in any order.
    """

    kind = "random-geometric"

    CACHE_LIMIT = 4096  # steps are pure functions of (seed, k); eviction is safe

    def __init__(self, m: int, radius: float, seed: int, horizon: int = 1000, max_retries: int = 1000):
        if m < 2:
            raise ValueError("random geometric sequence needs m >= 2")
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.m = m
        self.radius = float(radius)
        self.seed = int(seed)
        self.horizon = int(horizon)
        self.max_retries = int(max_retries)
        self._graph_cache: dict[int, WeightedGraph] = {}
        self._gossip_cache: dict[int, GossipMatrix] = {}

    @staticmethod
    def _trim(cache: dict) -> None:
        while len(cache) > RandomGeometricSequence.CACHE_LIMIT:
            cache.pop(next(iter(cache)))

    def graph(self, k: int) -> WeightedGraph:
        if k not in self._graph_cache:
            self._graph_cache[k] = self._sample(k)
            self._trim(self._graph_cache)
        return self._graph_cache[k]

    def gossip(self, k: int) -> GossipMatrix:
        if k not in self._gossip_cache:
            self._gossip_cache[k] = gossip_from_laplacian(self.graph(k))
            self._trim(self._gossip_cache)
        return self._gossip_cache[k]

    def _sample(self, k: int) -> WeightedGraph:
        rng = np.random.default_rng((self.seed, k))
        r2 = self.radius * self.radius
        for _ in range(self.max_retries):
            pts = rng.uniform(size=(self.m, 2))
            diff = pts[:, None, :] - pts[None, :, :]
            dist2 = np.sum(diff * diff, axis=2)
            ii, jj = np.where(np.triu(dist2 <= r2, k=1))
            g = WeightedGraph(self.m, tuple((int(i), int(j), 1.0) for i, j in zip(ii, jj)))
            if g.is_connected():
                return g
        raise RuntimeError(
            f"no connected geometric graph after {self.max_retries} resamples "
            f"(m={self.m}, radius={self.radius}, step={k}); increase the radius"
        )


class TwoStarHopSequence(GraphSequence):
    """Cycle of two star trees whose bridge vertex migrates one hop per step.

    The cycle starts with an empty left star and a full right star, hops the
    middle vertex left until the right star is empty, then hops back.  Vertex 0
    is the left center and vertex 1 the right center for the whole cycle; every
    graph is a tree on ``m`` nodes, and consecutive graphs differ by exactly
    one removed and one added edge.

    Unit weights are used.  Construction verifies that the per-step condition
    numbers stay within the ``8 m`` certificate and fails loudly otherwise.
    """

    kind = "two-star-hop"

    def __init__(self, m: int):
        if m < 4:
            raise ValueError("two-star hop topology needs m >= 4")
        self.m = m
        self._cycle = _CyclicSequence(self._build_cycle(m))
        self.period = self._cycle.period
        worst = max(g.chi for g in self._cycle._gossips)
        if worst > 8 * m:
            raise RuntimeError(
                f"two-star gossip condition number {worst:.3f} exceeds the 8m={8 * m} certificate"
            )
        self.chi = worst

    @staticmethod
    def _build_cycle(m: int) -> list[WeightedGraph]:
        v_left, v_right = 0, 1
        middle = 2
        left_leaves: list[int] = []
        right_leaves = list(range(3, m))

        def snapshot() -> WeightedGraph:
            edges = [(v_left, middle, 1.0), (middle, v_right, 1.0)]
            edges += [(v_left, u, 1.0) for u in left_leaves]
            edges += [(v_right, u, 1.0) for u in right_leaves]
            return WeightedGraph(m, tuple(edges))

        graphs = [snapshot()]
        for _ in range(m - 3):  # hops to the left
            v = right_leaves.pop()
            left_leaves.append(middle)
            middle = v
            graphs.append(snapshot())
        for _ in range(m - 4):  # hops back to the right; the last hop closes the cycle
            v = left_leaves.pop()
            right_leaves.append(middle)
            middle = v
            graphs.append(snapshot())
        return graphs

    def graph(self, k: int) -> WeightedGraph:
        return self._cycle.graph(k)

    def gossip(self, k: int) -> GossipMatrix:
        return self._cycle.gossip(k)


class RotatingStarSequence(GraphSequence):
    """Star graph whose center rotates to throttle exchange between two camps.

    The node set splits into ``s1``, ``s2`` (both of size ``ceil(m/3)``) and
    the remainder ``s3``.  Centers cycle through all of ``s3`` and then one
    designated vertex that lets ``s1`` and ``s2`` trade information; that
    vertex alternates between the first node of each camp on successive
    cycles.  Every step is a star, so the per-step condition number is ``m``
    and the mixing spectral gap is ``1/m``.
    """

    kind = "rotating-star"

    def __init__(self, m: int, s1: Sequence[int] | None = None, s2: Sequence[int] | None = None):
        if m < 3:
            raise ValueError("rotating star needs m >= 3")
        third = math.ceil(m / 3)
        if s1 is None and s2 is None:
            s1 = tuple(range(third))
            s2 = tuple(range(third, 2 * third))
        s1 = tuple(int(v) for v in (s1 or ()))
        s2 = tuple(int(v) for v in (s2 or ()))
        if len(s1) != third or len(s2) != third:
            raise ValueError(f"s1 and s2 must each have ceil(m/3)={third} nodes")
        if set(s1) & set(s2):
            raise ValueError("s1 and s2 must be disjoint")
        if not (set(s1) | set(s2)) <= set(range(m)):
            raise ValueError("s1/s2 contain nodes outside [0, m)")
        self.m = m
        self.s1, self.s2 = s1, s2
        self.s3 = tuple(v for v in range(m) if v not in set(s1) | set(s2))
        centers = []
        for exchange in (s1[0], s2[0]):
            centers.extend(self.s3)
            centers.append(exchange)
        self._cycle = _CyclicSequence([star_graph(m, center=c) for c in centers])
        self.period = self._cycle.period
        self.chi = float(m) if m > 2 else 1.0

    def graph(self, k: int) -> WeightedGraph:
        return self._cycle.graph(k)

    def gossip(self, k: int) -> GossipMatrix:
        return self._cycle.gossip(k)

    def center(self, k: int) -> int:
        g = self.graph(k)
        degree = np.zeros(self.m, dtype=int)
        for i, j, _ in g.edges:
            degree[i] += 1
            degree[j] += 1
        return int(np.argmax(degree))


def random_geometric_sequence(m: int, radius: float, seed: int, horizon: int = 1000) -> RandomGeometricSequence:
    return RandomGeometricSequence(m, radius, seed, horizon=horizon)


def two_star_hop_sequence(m: int) -> TwoStarHopSequence:
    return TwoStarHopSequence(m)


def rotating_star_sequence(m: int, s1: Sequence[int] | None = None, s2: Sequence[int] | None = None) -> RotatingStarSequence:
    return RotatingStarSequence(m, s1, s2)


def measure_chi(seq: GraphSequence, trials: int, seed: int, vectors_per_graph: int = 8, power_iters: int = 40) -> float:
    """Empirical contraction certificate for a graph sequence.

    Over sampled steps and zero-mean test vectors (random starts refined by
    power iteration on ``I - W``), finds the worst ratio ``||Wx - x|| / ||x||``
    and returns ``1 / (1 - ratio)``: the smallest chi certified by the tested
    vectors, matching the exact graph condition number for static graphs.
    Deterministic given the seed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    steps = trials if seq.period is None else min(trials, seq.period)
    worst = 0.0
    for k in range(steps):
        w = seq.gossip(k).matrix
        mix = np.eye(seq.m) - w
        for _ in range(vectors_per_graph):
            x = project_zero_mean(rng.standard_normal((seq.m, 1)))
            for _ in range(power_iters):
                nrm = np.linalg.norm(x)
                if nrm < 1e-300:
                    break
                x = project_zero_mean(mix @ (x / nrm))
            nrm = np.linalg.norm(x)
            if nrm < 1e-300:
                continue
            ratio = float(np.linalg.norm(mix @ x) / nrm)
            worst = max(worst, min(ratio, 1.0 - 1e-15))
    return 1.0 / (1.0 - worst)


def multi_stage_mix(seq: GraphSequence, start_step: int, stages: int, x: np.ndarray) -> np.ndarray:
    """Apply the multi-stage operator built from ``stages`` consecutive graphs.

    Returns ``x - prod_q (I - W(q)) x`` with ``q`` running chronologically from
    ``start_step``; with ``stages = ceil(chi)`` the zero-mean contraction
    factor is at most ``1/e``.
    """
    if stages < 1:
        raise ValueError("stages must be >= 1")
    x = np.asarray(x, dtype=float)
    residual = x
    for q in range(start_step, start_step + stages):
        residual = residual - apply_mixing(seq.gossip(q), residual)
    return x - residual


def chebyshev_mix(w: GossipMatrix | GraphSequence, degree: int, x: np.ndarray) -> np.ndarray:
    """Chebyshev-accelerated mixing step for a static gossip matrix.

    Evaluates ``x - Q_K(W) x`` where ``Q_K`` is the degree-``K`` Chebyshev
    polynomial on the positive spectrum ``[lam_min_pos, lam_max]`` normalized
    to ``Q_K(0) = 1``:  consensus inputs map to zero and the zero-mean residual
    is the minimax-optimal polynomial residual of that degree.
    """
    if isinstance(w, GraphSequence):
        if not w.is_static:
            raise ValueError("Chebyshev acceleration requires a static graph sequence")
        w = w.gossip(0)
    if degree < 1:
        raise ValueError("degree must be >= 1")
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != w.m:
        raise ValueError(f"node vector shape {x.shape} does not match {w.m} nodes")
    a, b = w.lam_min_pos, w.lam_max
    if b - a < 1e-12 * b:
        # Degenerate spectrum (e.g. complete graph): (1 - W/b)^K annihilates it.
        residual = x
        for _ in range(degree):
            residual = residual - (w.matrix @ residual) / b
        return x - residual

    def xi_apply(v: np.ndarray) -> np.ndarray:
        return ((a + b) * v - 2.0 * (w.matrix @ v)) / (b - a)

    xi0 = (b + a) / (b - a)
    t_prev, t_curr = x, xi_apply(x)
    s_prev, s_curr = 1.0, xi0
    for _ in range(degree - 1):
        t_prev, t_curr = t_curr, 2.0 * xi_apply(t_curr) - t_prev
        s_prev, s_curr = s_curr, 2.0 * xi0 * s_curr - s_prev
    return x - t_curr / s_curr


def dump_sequence(seq: GraphSequence, steps: int, sink: IO[str]) -> None:
    """Write ``steps`` graphs in the line format ``m``/``step``/``edge``."""
    sink.write(f"m {seq.m}\n")
    for k in range(steps):
        sink.write(f"step {k}\n")
        for i, j, w in seq.graph(k).edges:
            sink.write(f"edge {i} {j} {w!r}\n")


def parse_sequence_dump(source: Iterable[str]) -> list[WeightedGraph]:
    """Parse a dump produced by :func:`dump_sequence` back into graphs."""
    m: int | None = None
    graphs: list[WeightedGraph] = []
    edges: list[tuple[int, int, float]] = []
    started = False

    def flush():
        if started:
            graphs.append(WeightedGraph(m, tuple(edges)))
            edges.clear()

    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "m":
            m = int(parts[1])
        elif parts[0] == "step":
            if m is None:
                raise ValueError(f"line {lineno}: 'step' before 'm' header")
            flush()
            started = True
        elif parts[0] == "edge":
            if not started:
                raise ValueError(f"line {lineno}: 'edge' outside a step block")
            edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
        else:
            raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
    flush()
    return graphs
