"""Finite-sum objectives distributed over network nodes.

Each of the ``m`` nodes owns ``n`` component functions; the node objective is
their mean, and the global objective is the average over nodes.  Objectives
expose component-level gradient access (the oracle unit used for cost
accounting) plus smoothness metadata needed by step-size schedules:

* ``L``      -- uniform smoothness of every node objective,
* ``L_ij``   -- per-component smoothness (drives importance sampling),
* ``Lbar``   -- worst node-average of ``L_ij``,
* ``Lhat``   -- mean-square ("average") smoothness of the components,
* ``mu``     -- strong convexity (0 for nonconvex losses).

Objectives are immutable after construction and their evaluations are pure,
so they can be shared across threads and runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SmoothnessInfo",
    "DatasetShard",
    "FiniteSumObjective",
    "CallableFiniteSum",
    "CountingObjective",
    "LogisticObjective",
    "NllsObjective",
    "logistic_objective",
    "nlls_objective",
    "full_gradient",
    "batch_gradient",
    "finite_difference_check",
    "FiniteDifferenceReport",
]


@dataclass(frozen=True)
class SmoothnessInfo:
    """Smoothness and convexity constants attached to a finite-sum objective."""

    L: float
    mu: float
    L_ij: np.ndarray  # (m, n)
    Lhat: float

    @property
    def Lbar_i(self) -> np.ndarray:
        return self.L_ij.mean(axis=1)

    @property
    def Lbar(self) -> float:
        return float(self.Lbar_i.max())

    def validate(self, n: int) -> None:
        tol = 1 + 1e-12
        if not (0 <= self.mu <= self.L * tol):
            raise ValueError(f"need 0 <= mu <= L, got mu={self.mu}, L={self.L}")
        if not (self.L <= self.Lbar * tol and self.Lbar <= n * self.L * tol):
            raise ValueError(f"need L <= Lbar <= n*L, got L={self.L}, Lbar={self.Lbar}, n={n}")
        if not (self.L <= self.Lhat * tol and self.Lhat <= np.sqrt(n) * self.L * tol):
            raise ValueError(f"need L <= Lhat <= sqrt(n)*L, got L={self.L}, Lhat={self.Lhat}")


def _finalize_constants(l_ij: np.ndarray, node_caps: np.ndarray, mu: float, n: int) -> SmoothnessInfo:
    """Reconcile per-component bounds with node-level caps.

    Clipping component bounds to ``n * L`` is lossless for convex components
    (each is at most n times as curved as its node mean) and restores the
    ``L <= Lbar <= n L`` ordering that over-conservative per-row bounds can
    break; for empirically estimated nonconvex components the clipped values
    are metadata used only through that ordering.
    """
    l_ij = np.asarray(l_ij, dtype=float)
    node_bound = np.minimum(l_ij.mean(axis=1), node_caps)
    L = float(node_bound.max())
    l_ij = np.clip(l_ij, 1e-12 * L, n * L)
    L = min(L, float(l_ij.mean(axis=1).max()))
    lhat = float(np.sqrt((l_ij**2).mean(axis=1)).max())
    lhat = min(max(lhat, L), math.sqrt(n) * L)
    return SmoothnessInfo(L=L, mu=min(mu, L), L_ij=l_ij, Lhat=lhat)


@dataclass(frozen=True)
class DatasetShard:
    """Rows owned by one node, already grouped into its n component blocks."""

    node: int
    features: np.ndarray  # (rows, d)
    labels: np.ndarray  # (rows,)
    block_rows: tuple[np.ndarray, ...]  # row indices per component

    @property
    def n(self) -> int:
        return len(self.block_rows)

    @property
    def d(self) -> int:
        return self.features.shape[1]


class FiniteSumObjective:
    """Abstract m-node, n-component objective with gradient access."""

    m: int
    n: int
    d: int
    info: SmoothnessInfo

    # -- component oracle ---------------------------------------------------
    def component_value(self, i: int, j: int, w: np.ndarray) -> float:
        raise NotImplementedError

    def component_gradient(self, i: int, j: int, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def component_gradient_pair(self, i: int, j: int, w_new: np.ndarray, w_old: np.ndarray):
        """Gradients of one component at two points (one oracle unit: one data
        slice touched, as charged by :class:`CountingObjective`)."""
        return self.component_gradient(i, j, w_new), self.component_gradient(i, j, w_old)

    def sampled_gradients(self, i: int, indices: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Component gradients for a batch of indices, shape (len(indices), d)."""
        return np.stack([self.component_gradient(i, int(j), w) for j in indices])

    def sampled_gradient_pairs(self, i: int, indices: np.ndarray, w_new: np.ndarray, w_old: np.ndarray):
        """Batched difference-estimator queries: one oracle unit per index."""
        return self.sampled_gradients(i, indices, w_new), self.sampled_gradients(i, indices, w_old)

    # -- node-level helpers --------------------------------------------------
    def local_value(self, i: int, w: np.ndarray) -> float:
        return float(np.mean([self.component_value(i, j, w) for j in range(self.n)]))

    def local_gradient(self, i: int, w: np.ndarray) -> np.ndarray:
        g = np.zeros(self.d)
        for j in range(self.n):
            g += self.component_gradient(i, j, w)
        return g / self.n

    def local_component_gradients(self, i: int, w: np.ndarray) -> np.ndarray:
        """All n component gradients of node i at one point, shape (n, d)."""
        return np.stack([self.component_gradient(i, j, w) for j in range(self.n)])

    # -- stacked and averaged views -------------------------------------------
    def stacked_gradient(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.m, self.d):
            raise ValueError(f"expected node vector of shape {(self.m, self.d)}, got {x.shape}")
        return np.stack([self.local_gradient(i, x[i]) for i in range(self.m)])

    def average_value(self, w: np.ndarray) -> float:
        return float(np.mean([self.local_value(i, w) for i in range(self.m)]))

    def average_gradient(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros(self.d)
        for i in range(self.m):
            g += self.local_gradient(i, w)
        return g / self.m


def full_gradient(obj: FiniteSumObjective, x: np.ndarray) -> np.ndarray:
    """Stacked per-node gradients: block i is the gradient of node i's mean at x_i."""
    return obj.stacked_gradient(np.asarray(x, dtype=float))


def batch_gradient(obj: FiniteSumObjective, i: int, indices: Sequence[int], weights: Sequence[float], w: np.ndarray) -> np.ndarray:
    """Weighted component-gradient sum ``sum_k weights[k] * grad f_{i,indices[k]}(w)``."""
    indices = np.asarray(indices, dtype=int)
    weights = np.asarray(weights, dtype=float)
    if indices.shape != weights.shape:
        raise ValueError("indices and weights must have matching lengths")
    if indices.size and (indices.min() < 0 or indices.max() >= obj.n):
        raise IndexError(f"component index out of range [0, {obj.n})")
    g = np.zeros(obj.d)
    for j, wt in zip(indices, weights):
        g += wt * obj.component_gradient(i, int(j), w)
    return g


class CountingObjective(FiniteSumObjective):
    """Wrapper that charges one unit per component-gradient oracle query.

    A paired query (same component at two points, as used by difference
    estimators) charges a single unit; node-level full gradients charge n.
    Values are free.
    """

    def __init__(self, base: FiniteSumObjective):
        self.base = base
        self.m, self.n, self.d = base.m, base.n, base.d
        self.info = base.info
        self.calls = np.zeros(base.m, dtype=np.int64)

    def component_value(self, i, j, w):
        return self.base.component_value(i, j, w)

    def component_gradient(self, i, j, w):
        self.calls[i] += 1
        return self.base.component_gradient(i, j, w)

    def component_gradient_pair(self, i, j, w_new, w_old):
        self.calls[i] += 1
        return self.base.component_gradient_pair(i, j, w_new, w_old)

    def sampled_gradients(self, i, indices, w):
        self.calls[i] += len(indices)
        return self.base.sampled_gradients(i, indices, w)

    def sampled_gradient_pairs(self, i, indices, w_new, w_old):
        self.calls[i] += len(indices)
        return self.base.sampled_gradient_pairs(i, indices, w_new, w_old)

    def local_value(self, i, w):
        return self.base.local_value(i, w)

    def local_gradient(self, i, w):
        self.calls[i] += self.n
        return self.base.local_gradient(i, w)

    def local_component_gradients(self, i, w):
        self.calls[i] += self.n
        return self.base.local_component_gradients(i, w)

    def max_calls(self) -> int:
        return int(self.calls.max())


class CallableFiniteSum(FiniteSumObjective):
    """Finite sum assembled from per-component (value, gradient) callables.

    Intended for synthetic instances and tests; ``components[i][j]`` maps a
    point to ``(value, gradient)``.
    """

    def __init__(self, components: Sequence[Sequence[Callable[[np.ndarray], tuple[float, np.ndarray]]]], d: int, info: SmoothnessInfo):
        self.m = len(components)
        self.n = len(components[0])
        if any(len(row) != self.n for row in components):
            raise ValueError("all nodes must own the same number of components")
        self.d = d
        self._components = components
        self.info = info
        info.validate(self.n)

    def component_value(self, i, j, w):
        return float(self._components[i][j](np.asarray(w, dtype=float))[0])

    def component_gradient(self, i, j, w):
        return np.asarray(self._components[i][j](np.asarray(w, dtype=float))[1], dtype=float)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


class LogisticObjective(FiniteSumObjective):
    """l2-regularized logistic loss over per-node data shards.

    Component (i, j) averages ``log(1 + exp(-y <a, w>))`` over its block rows
    and adds ``(reg/2)||w||^2``.
    """

    def __init__(self, shards: Sequence[DatasetShard], reg: float):
        if reg < 0:
            raise ValueError("regularization must be nonnegative")
        self.m = len(shards)
        self.n = shards[0].n
        self.d = shards[0].d
        self.reg = float(reg)
        self._shards = list(shards)
        for s in self._shards:
            if s.n != self.n or s.d != self.d:
                raise ValueError("all shards must agree on n and d")
            if not np.all(np.isin(s.labels, (-1.0, 1.0))):
                bad = s.labels[~np.isin(s.labels, (-1.0, 1.0))][0]
                raise ValueError(f"logistic labels must be +-1, got {bad}")
            for j, rows in enumerate(s.block_rows):
                if rows.size == 0:
                    raise ValueError(f"empty component block (node {s.node}, component {j})")
        self.info = self._smoothness()
        self.info.validate(self.n)

    def _smoothness(self) -> SmoothnessInfo:
        l_ij = np.zeros((self.m, self.n))
        caps = np.zeros(self.m)
        for i, s in enumerate(self._shards):
            row_norms = np.sum(s.features**2, axis=1)
            row_weight = np.zeros(len(s.labels))
            for j, rows in enumerate(s.block_rows):
                l_ij[i, j] = row_norms[rows].max() / 4.0 + self.reg
                row_weight[rows] = 1.0 / (self.n * rows.size)
            # Node Hessian bound (1/4) sum_r weight_r a_r a_r^T via power iteration.
            a = s.features * np.sqrt(row_weight)[:, None]
            v = np.full(self.d, 1.0 / np.sqrt(self.d))
            for _ in range(25):
                v = a.T @ (a @ v)
                nrm = np.linalg.norm(v)
                if nrm == 0:
                    break
                v /= nrm
            caps[i] = float(v @ (a.T @ (a @ v))) / 4.0 + self.reg
        return _finalize_constants(l_ij, caps, self.reg, self.n)

    def _block(self, i: int, j: int):
        s = self._shards[i]
        rows = s.block_rows[j]
        return s.features[rows], s.labels[rows]

    def component_value(self, i, j, w):
        a, y = self._block(i, j)
        margins = y * (a @ w)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.reg * np.dot(w, w))

    def component_gradient(self, i, j, w):
        a, y = self._block(i, j)
        coeff = -y * _sigmoid(-y * (a @ w))
        return a.T @ coeff / len(y) + self.reg * w

    def local_value(self, i, w):
        s = self._shards[i]
        per_row = np.logaddexp(0.0, -s.labels * (s.features @ w))
        total = sum(np.mean(per_row[rows]) for rows in s.block_rows)
        return float(total / self.n + 0.5 * self.reg * np.dot(w, w))

    def local_gradient(self, i, w):
        s = self._shards[i]
        coeff = -s.labels * _sigmoid(-s.labels * (s.features @ w))
        g = np.zeros(self.d)
        for rows in s.block_rows:
            g += s.features[rows].T @ coeff[rows] / rows.size
        return g / self.n + self.reg * w

    def sampled_gradients(self, i, indices, w):
        s = self._shards[i]
        rows = np.concatenate([s.block_rows[int(j)] for j in indices])
        a, y = s.features[rows], s.labels[rows]
        per_row = a * (-y * _sigmoid(-y * (a @ w)))[:, None]
        sizes = np.array([s.block_rows[int(j)].size for j in indices])
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        sums = np.add.reduceat(per_row, offsets, axis=0)
        return sums / sizes[:, None] + self.reg * w

    def local_component_gradients(self, i, w):
        return self.sampled_gradients(i, np.arange(self.n), w)


class NllsObjective(FiniteSumObjective):
    """Nonconvex sigmoid least squares: mean of ``(y - sigmoid(<a, w>))^2``.

    No closed-form smoothness constants exist; they are estimated from seeded
    random gradient-difference ratios and padded by a documented safety factor.
    """

    SAFETY = 1.2

    def __init__(self, shards: Sequence[DatasetShard], probe_pairs: int = 1000, probe_radius: float = 10.0, probe_seed: int = 1234):
        self.m = len(shards)
        self.n = shards[0].n
        self.d = shards[0].d
        self._shards = list(shards)
        for s in self._shards:
            if s.n != self.n or s.d != self.d:
                raise ValueError("all shards must agree on n and d")
            for j, rows in enumerate(s.block_rows):
                if rows.size == 0:
                    raise ValueError(f"empty component block (node {s.node}, component {j})")
        self.info = self._estimate_smoothness(probe_pairs, probe_radius, probe_seed)
        self.info.validate(self.n)

    def _estimate_smoothness(self, pairs: int, radius: float, seed: int) -> SmoothnessInfo:
        rng = np.random.default_rng(seed)
        u = rng.uniform(-1, 1, size=(pairs, self.d))
        u *= (radius * rng.uniform(0, 1, size=(pairs, 1)) ** (1.0 / self.d)) / np.maximum(
            np.linalg.norm(u, axis=1, keepdims=True), 1e-12
        )
        # Mixed gap scales: tiny gaps probe local curvature, large ones the secant.
        direction = rng.normal(size=(pairs, self.d))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        step = radius * 10.0 ** rng.uniform(-4, -0.5, size=(pairs, 1))
        v = u + step * direction
        gap = np.maximum(np.linalg.norm(u - v, axis=1), 1e-12)

        l_ij = np.zeros((self.m, self.n))
        l_nodes = np.zeros(self.m)
        lhat_nodes = np.zeros(self.m)
        for i, s in enumerate(self._shards):
            tu = s.features @ u.T  # (rows, pairs)
            tv = s.features @ v.T
            cu = self._residual_coeff(_sigmoid(tu), s.labels[:, None])
            cv = self._residual_coeff(_sigmoid(tv), s.labels[:, None])
            sq_norms = np.zeros((self.n, pairs))
            node_diff = np.zeros((self.d, pairs))
            for j, rows in enumerate(s.block_rows):
                diff = s.features[rows].T @ (cu[rows] - cv[rows]) / rows.size  # (d, pairs)
                sq_norms[j] = np.sum(diff**2, axis=0)
                node_diff += diff
                l_ij[i, j] = float(np.max(np.sqrt(sq_norms[j]) / gap))
            lhat_nodes[i] = float(np.max(np.sqrt(sq_norms.mean(axis=0)) / gap))
            l_nodes[i] = float(np.max(np.linalg.norm(node_diff / self.n, axis=0) / gap))
        info = _finalize_constants(l_ij * self.SAFETY, l_nodes * self.SAFETY, 0.0, self.n)
        lhat = min(max(float(lhat_nodes.max()) * self.SAFETY, info.L), np.sqrt(self.n) * info.L)
        return SmoothnessInfo(L=info.L, mu=0.0, L_ij=info.L_ij, Lhat=lhat)

    @staticmethod
    def _residual_coeff(sig, y):
        return 2.0 * (sig - y) * sig * (1.0 - sig)

    def _block(self, i: int, j: int):
        s = self._shards[i]
        rows = s.block_rows[j]
        return s.features[rows], s.labels[rows]

    def component_value(self, i, j, w):
        a, y = self._block(i, j)
        return float(np.mean((y - _sigmoid(a @ w)) ** 2))

    def component_gradient(self, i, j, w):
        a, y = self._block(i, j)
        sig = _sigmoid(a @ w)
        return a.T @ (2.0 * (sig - y) * sig * (1.0 - sig)) / len(y)

    def local_value(self, i, w):
        s = self._shards[i]
        res_sq = (s.labels - _sigmoid(s.features @ w)) ** 2
        return float(sum(np.mean(res_sq[rows]) for rows in s.block_rows) / self.n)

    def local_gradient(self, i, w):
        s = self._shards[i]
        sig = _sigmoid(s.features @ w)
        coeff = 2.0 * (sig - s.labels) * sig * (1.0 - sig)
        g = np.zeros(self.d)
        for rows in s.block_rows:
            g += s.features[rows].T @ coeff[rows] / rows.size
        return g / self.n

    def sampled_gradients(self, i, indices, w):
        s = self._shards[i]
        rows = np.concatenate([s.block_rows[int(j)] for j in indices])
        a, y = s.features[rows], s.labels[rows]
        sig = _sigmoid(a @ w)
        per_row = a * (2.0 * (sig - y) * sig * (1.0 - sig))[:, None]
        sizes = np.array([s.block_rows[int(j)].size for j in indices])
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        return np.add.reduceat(per_row, offsets, axis=0) / sizes[:, None]

    def local_component_gradients(self, i, w):
        return self.sampled_gradients(i, np.arange(self.n), w)


def logistic_objective(shards: Sequence[DatasetShard], lambda_reg: float) -> LogisticObjective:
    return LogisticObjective(shards, lambda_reg)


def nlls_objective(shards: Sequence[DatasetShard], **probe_kwargs) -> NllsObjective:
    return NllsObjective(shards, **probe_kwargs)


@dataclass(frozen=True)
class FiniteDifferenceReport:
    max_rel_error: float
    passed: bool
    worst_node: int
    worst_coordinate: int


def finite_difference_check(obj: FiniteSumObjective, x: np.ndarray, h: float, tolerance: float) -> FiniteDifferenceReport:
    """Central-difference check of every node gradient at the given node vector."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    worst, w_node, w_coord = 0.0, 0, 0
    for i in range(obj.m):
        w = x[i]
        analytic = obj.local_gradient(i, w)
        scale = max(1.0, float(np.linalg.norm(analytic)))
        for c in range(obj.d):
            e = np.zeros(obj.d)
            e[c] = h
            fd = (obj.local_value(i, w + e) - obj.local_value(i, w - e)) / (2 * h)
            rel = abs(fd - analytic[c]) / scale
            if rel > worst:
                worst, w_node, w_coord = rel, i, c
    return FiniteDifferenceReport(max_rel_error=worst, passed=worst < tolerance, worst_node=w_node, worst_coordinate=w_coord)
