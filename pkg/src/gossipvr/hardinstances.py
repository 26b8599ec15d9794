"""Worst-case problem instances for decentralized finite-sum optimization.

Two constructions:

* a strongly convex coupled-chain family on the two-star hop topology, whose
  minimizer is a geometric series per component slot — used to exercise the
  communication/oracle lower-bound evaluator for the strongly convex regime;
* a nonconvex zero-chain family on the rotating-star topology, built from a
  smooth bump (``psi``) and a Gaussian integral (``phi``).  A zero-chain
  function activates at most one new coordinate per gradient evaluation, so
  the largest activated coordinate index ("progress") of any run is bounded
  by the communication and oracle budgets; ``progress_audit`` checks that
  bound on recorded traces.

The chain coordinates are kept exactly zero in floating point until activated
(bump values and slopes are exact zeros below the threshold), so progress
accounting is exact, not approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import GraphSequence, rotating_star_sequence
from .objectives import FiniteSumObjective, SmoothnessInfo

__all__ = [
    "psi",
    "psi_prime",
    "phi",
    "phi_prime",
    "zero_chain_l",
    "prog",
    "ChainObjective",
    "strongly_convex_chain",
    "chain_q",
    "ZeroChainObjective",
    "nonconvex_hard_objective",
    "lower_bound_value",
    "lower_bound_components",
    "ProgressTracker",
    "progress_audit",
    "ProgressAuditReport",
    "SMOOTHNESS_CONST",
    "RANGE_CONST",
    "GRADIENT_CONST",
]

# Constants of the base zero-chain function.
SMOOTHNESS_CONST = 152.0  # smoothness of l
RANGE_CONST = 12.0  # per-dimension bound on l(0) - inf l
GRADIENT_CONST = 23.0  # sup-norm bound on grad l

_SQRT_E = math.sqrt(math.e)
_erf = np.vectorize(math.erf, otypes=[float])


def psi(z):
    """Smooth bump: 0 below 1/2, exp(1 - 1/(2z-1)^2) above."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    hot = z > 0.5
    t = 2.0 * z[hot] - 1.0
    out[hot] = np.exp(1.0 - 1.0 / (t * t))
    return out if out.ndim else float(out)


def psi_prime(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    hot = z > 0.5
    t = 2.0 * z[hot] - 1.0
    out[hot] = np.exp(1.0 - 1.0 / (t * t)) * 4.0 / (t * t * t)
    return out if out.ndim else float(out)


def phi(z):
    """Scaled Gaussian integral, in closed form through the error function."""
    z = np.asarray(z, dtype=float)
    out = _SQRT_E * math.sqrt(math.pi / 2.0) * (1.0 + _erf(z / math.sqrt(2.0)))
    return out if out.ndim else float(out)


def phi_prime(z):
    z = np.asarray(z, dtype=float)
    out = _SQRT_E * np.exp(-0.5 * z * z)
    return out if out.ndim else float(out)


def prog(x) -> int:
    """Largest 1-based index of a nonzero coordinate; 0 for the zero vector."""
    x = np.asarray(x)
    nz = np.flatnonzero(x)
    return int(nz[-1] + 1) if nz.size else 0


def _chain_terms(x: np.ndarray, terms: np.ndarray, coef: float) -> tuple[float, np.ndarray]:
    """Value and gradient of ``coef * sum over selected chain terms``.

    Term 1 is ``-psi(1) phi(x_1)``; term ``j >= 2`` couples coordinates
    ``j-1`` and ``j``.  Gradient entries stay exactly zero wherever every
    involved bump factor is zero: the bump and its slope are exact 0.0 below
    the threshold, and products/sums of exact zeros remain zero.
    """
    d = x.shape[0]
    val = 0.0
    grad = np.zeros(d)
    terms = np.asarray(terms, dtype=int)
    if terms.size and terms[0] == 1:
        val -= psi(1.0) * phi(x[0])
        grad[0] -= psi(1.0) * phi_prime(x[0])
        terms = terms[1:]
    if terms.size:
        a = x[terms - 2]
        b = x[terms - 1]
        bump_m, bump_p = psi(-a), psi(a)
        slope_m, slope_p = psi_prime(-a), psi_prime(a)
        phi_m, phi_p = phi(-b), phi(b)
        val += float(np.sum(bump_m * phi_m - bump_p * phi_p))
        # Term indices are strictly increasing, so each scatter target is unique.
        grad[terms - 1] += -bump_m * phi_prime(-b) - bump_p * phi_prime(b)
        grad[terms - 2] += -slope_m * phi_m - slope_p * phi_p
    return coef * val, coef * grad


def zero_chain_l(x: np.ndarray, d: int | None = None) -> tuple[float, np.ndarray]:
    """Value and gradient of the base zero-chain function on R^d."""
    x = np.asarray(x, dtype=float)
    if d is None:
        d = x.shape[0]
    if x.shape[0] != d:
        raise ValueError(f"expected dimension {d}, got {x.shape[0]}")
    return _chain_terms(x, np.arange(1, d + 1), 1.0)


# ---------------------------------------------------------------------------
# Strongly convex chain instance
# ---------------------------------------------------------------------------


def chain_q(kappa: float) -> float:
    """Decay ratio of the chain minimizer for condition number kappa."""
    s = math.sqrt(2.0 * kappa / 3.0 + 1.0 / 3.0)
    return (s - 1.0) / (s + 1.0)


@dataclass(frozen=True)
class ChainRoles:
    v_left: int
    v_right: int


class ChainObjective(FiniteSumObjective):
    """Coupled quadratic chains split across two designated nodes.

    The variable holds ``n`` slots of ``dim`` coordinates; component
    ``(i, j)`` applies node i's chain function to slot j alone.  The left
    node couples even coordinates to odd, the right node odd to even, and all
    other nodes carry a weak quadratic, so per-slot progress toward the
    geometric-series minimizer requires alternating communication between the
    two chain nodes.

    Per-node strong convexity differs (the bystander nodes have
    ``mu/(m-2)``); ``info.mu`` records the uniform lower bound.
    """

    def __init__(self, m: int, n: int, big_l: float, mu: float, dim: int, roles: ChainRoles | None = None):
        if m < 3:
            raise ValueError("chain instance needs m >= 3")
        if not (0 < mu < big_l):
            raise ValueError("need 0 < mu < L")
        if dim < 2:
            raise ValueError("need dim >= 2")
        self.m, self.n, self.dim = m, n, dim
        self.d = n * dim
        self.big_l, self.mu_chain = float(big_l), float(mu)
        self.roles = roles or ChainRoles(v_left=0, v_right=1)
        self.q = chain_q(big_l / mu)
        self.x_star_slot = self.q ** np.arange(1, dim + 1)
        self.tail_error = self.q ** (2 * dim) / (1.0 - self.q * self.q)
        mu_other = mu / (m - 2)
        self.mu_i = np.full(m, mu_other)
        self.mu_i[[self.roles.v_left, self.roles.v_right]] = mu
        l_ij = np.full((m, n), mu_other)
        l_ij[[self.roles.v_left, self.roles.v_right]] = big_l
        self.info = SmoothnessInfo(L=float(big_l), mu=float(mu_other), L_ij=l_ij, Lhat=float(big_l))
        self.info.validate(n)

    def x_star(self) -> np.ndarray:
        """Minimizer of the aggregate objective: the slot-wise geometric series."""
        return np.tile(self.x_star_slot, self.n)

    def _slot(self, x: np.ndarray, j: int) -> np.ndarray:
        return x[j * self.dim : (j + 1) * self.dim]

    def _g(self, i: int, y: np.ndarray) -> tuple[float, np.ndarray]:
        mu, big_l = self.mu_chain, self.big_l
        if i == self.roles.v_left:
            c = (big_l - mu) / 4.0
            val = 0.5 * mu * y @ y + c * (y[0] - 1.0) ** 2
            grad = mu * y.copy()
            grad[0] += 2.0 * c * (y[0] - 1.0)
            for k in range(1, (self.dim - 1) // 2 + 1):  # pairs (2k, 2k+1), 1-based
                lo, hi = 2 * k - 1, 2 * k  # 0-based
                diff = y[lo] - y[hi]
                val += c * diff * diff
                grad[lo] += 2.0 * c * diff
                grad[hi] -= 2.0 * c * diff
            return val, grad
        if i == self.roles.v_right:
            c = (big_l - mu) / 4.0
            val = 0.5 * mu * y @ y
            grad = mu * y.copy()
            for k in range(1, self.dim // 2 + 1):  # pairs (2k-1, 2k), 1-based
                lo, hi = 2 * k - 2, 2 * k - 1
                diff = y[lo] - y[hi]
                val += c * diff * diff
                grad[lo] += 2.0 * c * diff
                grad[hi] -= 2.0 * c * diff
            return val, grad
        mu_other = mu / (self.m - 2)
        return 0.5 * mu_other * y @ y, mu_other * y

    def component_value(self, i, j, w):
        return float(self._g(i, self._slot(np.asarray(w, dtype=float), j))[0])

    def component_gradient(self, i, j, w):
        w = np.asarray(w, dtype=float)
        g = np.zeros(self.d)
        g[j * self.dim : (j + 1) * self.dim] = self._g(i, self._slot(w, j))[1]
        return g

    def local_value(self, i, w):
        w = np.asarray(w, dtype=float)
        return float(sum(self._g(i, self._slot(w, j))[0] for j in range(self.n)) / self.n)

    def local_gradient(self, i, w):
        w = np.asarray(w, dtype=float)
        g = np.empty(self.d)
        for j in range(self.n):
            g[j * self.dim : (j + 1) * self.dim] = self._g(i, self._slot(w, j))[1]
        return g / self.n


def strongly_convex_chain(m: int, n: int, big_l: float, mu: float, dim: int) -> ChainObjective:
    return ChainObjective(m, n, big_l, mu, dim)


# ---------------------------------------------------------------------------
# Nonconvex zero-chain instance
# ---------------------------------------------------------------------------


class ZeroChainObjective(FiniteSumObjective):
    """Scaled zero-chain functions split over three node camps and n blocks.

    Camp 1 owns the odd coupling terms, camp 2 the even ones, the rest are
    identically zero.  Each camp function splits into n blocks by residue of
    the term index, scaled by n, so the block average reproduces the camp
    function exactly while the blocks' mean-square smoothness grows by
    sqrt(n).
    """

    def __init__(self, m: int, n: int, big_l: float, delta: float, budget_comms: int, budget_oracle: int):
        if m < 3:
            raise ValueError("zero-chain instance needs m >= 3")
        if budget_comms < m / 4:
            raise ValueError("communication budget must be at least m/4")
        if budget_oracle < n:
            raise ValueError("oracle budget must be at least n")
        if big_l <= 0 or delta <= 0:
            raise ValueError("L and Delta must be positive")
        self.m, self.n = m, n
        third = math.ceil(m / 3)
        self.s1 = tuple(range(third))
        self.s2 = tuple(range(third, 2 * third))
        self.s3 = tuple(range(2 * third, m))
        self.big_l, self.delta = float(big_l), float(delta)
        depth = min((4 * budget_comms) // m, budget_oracle // n)
        self.d = int(2 + depth)
        self.scale_c = math.sqrt(
            3.0 * SMOOTHNESS_CONST * delta / (big_l * RANGE_CONST * min(16.0 * budget_comms / m, 4.0 * budget_oracle / n))
        )
        self.camp_coef = m / third  # multiplier on the camp chain functions
        self.value_coef = big_l * self.scale_c**2 / (3.0 * SMOOTHNESS_CONST)
        self._block_terms = self._build_block_terms()
        # Tight node smoothness: camp_coef <= 3 so this never exceeds big_l.
        l_eff = big_l * self.camp_coef / 3.0
        l_ij = np.full((m, n), 1e-12 * l_eff)
        l_ij[: 2 * third] = n * l_eff
        self.info = SmoothnessInfo(L=float(l_eff), mu=0.0, L_ij=l_ij, Lhat=float(math.sqrt(n) * l_eff))
        self.info.validate(n)

    def _build_block_terms(self) -> dict[tuple[int, int], np.ndarray]:
        """Term indices per (camp, block): odd residues for camp 1, even for camp 2."""
        n, d = self.n, self.d
        table: dict[tuple[int, int], np.ndarray] = {}
        all_j = np.arange(2, d + 1)
        for k in range(1, n + 1):
            odd = all_j[all_j % (2 * n) == (2 * k - 1) % (2 * n)]
            if k == 1:
                odd = np.concatenate(([1], odd))
            table[(1, k - 1)] = odd
            table[(2, k - 1)] = all_j[all_j % (2 * n) == (2 * k) % (2 * n)]
        return table

    def _camp(self, i: int) -> int:
        if i in self.s1:
            return 1
        if i in self.s2:
            return 2
        return 3

    def _component(self, i: int, j: int, w: np.ndarray) -> tuple[float, np.ndarray]:
        camp = self._camp(i)
        if camp == 3:
            return 0.0, np.zeros(self.d)
        terms = self._block_terms[(camp, j)]
        val, grad = _chain_terms(w / self.scale_c, terms, self.n * self.camp_coef)
        return self.value_coef * val, (self.value_coef / self.scale_c) * grad

    def component_value(self, i, j, w):
        return float(self._component(i, j, np.asarray(w, dtype=float))[0])

    def component_gradient(self, i, j, w):
        return self._component(i, j, np.asarray(w, dtype=float))[1]

    def local_value(self, i, w):
        w = np.asarray(w, dtype=float)
        camp = self._camp(i)
        if camp == 3:
            return 0.0
        total = sum(self._component(i, j, w)[0] for j in range(self.n))
        return float(total / self.n)

    def local_gradient(self, i, w):
        w = np.asarray(w, dtype=float)
        camp = self._camp(i)
        if camp == 3:
            return np.zeros(self.d)
        g = np.zeros(self.d)
        for j in range(self.n):
            g += self._component(i, j, w)[1]
        return g / self.n

    def camp_value_grad(self, camp: int, w: np.ndarray) -> tuple[float, np.ndarray]:
        """Unsplit camp function (mean of its blocks), for splitting checks."""
        node = self.s1[0] if camp == 1 else self.s2[0]
        return self.local_value(node, np.asarray(w, dtype=float)), self.local_gradient(node, np.asarray(w, dtype=float))


def nonconvex_hard_objective(
    m: int, n: int, big_l: float, delta: float, budget_comms: int, budget_oracle: int
) -> tuple[ZeroChainObjective, GraphSequence]:
    """Zero-chain hard instance paired with its rotating-star graph sequence."""
    obj = ZeroChainObjective(m, n, big_l, delta, budget_comms, budget_oracle)
    seq = rotating_star_sequence(m, obj.s1, obj.s2)
    return obj, seq


# ---------------------------------------------------------------------------
# Lower-bound evaluator (strongly convex regime)
# ---------------------------------------------------------------------------


def lower_bound_components(kappa_b: float, kappa_s: float, chi: float, n: int, n_comms: float, n_oracle: float):
    """The two residual-error floors; None where a floor does not apply."""
    t1 = t2 = None
    if chi > 24 and kappa_b >= 1:
        base = 1.0 - 2.0 / (math.sqrt(2.0 * kappa_b / 3.0 + 1.0 / 3.0) + 1.0)
        t1 = base ** (2.0 + 16.0 * n_comms / (chi - 24.0))
    if kappa_s >= n:
        base = 1.0 - 2.0 * n / (math.sqrt(n) * math.sqrt(2.0 * kappa_s / 3.0 + n / 3.0) + n)
        t2 = base ** (4.0 * n_oracle / n)
    return t1, t2


def lower_bound_value(kappa_b: float, kappa_s: float, chi: float, n: int, n_comms: float, n_oracle: float) -> float:
    """Residual-error floor after the given communication and oracle budgets."""
    t1, t2 = lower_bound_components(kappa_b, kappa_s, chi, n, n_comms, n_oracle)
    if t1 is None and t2 is None:
        raise ValueError(f"no floor applies: need chi > 24 (got {chi}) or kappa_s >= n (got {kappa_s} vs {n})")
    return max(v for v in (t1, t2) if v is not None)


# ---------------------------------------------------------------------------
# Progress audit
# ---------------------------------------------------------------------------


@dataclass
class ProgressTracker:
    """Running max of activated coordinates per node, sampled every step."""

    m: int
    node_prog: np.ndarray = field(init=False)
    audit_points: list[tuple[int, int, int]] = field(init=False)  # (comms, oracle, global prog)

    def __post_init__(self):
        self.node_prog = np.zeros(self.m, dtype=int)
        self.audit_points = []

    def update(self, x: np.ndarray, comms: int, oracle_calls: int) -> None:
        for i in range(self.m):
            self.node_prog[i] = max(self.node_prog[i], prog(x[i]))
        self.audit_points.append((int(comms), int(oracle_calls), int(self.node_prog.max())))

    @property
    def global_prog(self) -> int:
        return int(self.node_prog.max()) if self.audit_points else 0


@dataclass(frozen=True)
class ProgressAuditReport:
    passed: bool
    violations: tuple[tuple[int, int, int, int], ...]  # (comms, oracle, prog, bound)
    final_prog: int


def progress_audit(tracker: ProgressTracker, m: int, n: int) -> ProgressAuditReport:
    """Check every audit point against the budget bound on activated coordinates."""
    violations = []
    for comms, oracle, p in tracker.audit_points:
        bound = min((4 * comms) // m + 1, oracle // n + 1)
        if p > bound:
            violations.append((comms, oracle, p, bound))
    return ProgressAuditReport(passed=not violations, violations=tuple(violations), final_prog=tracker.global_prog)
