"""Decentralized variance-reduced optimizers over gossip networks.

Three methods share a common driver:

* an accelerated primal method for strongly convex finite sums that combines
  a saddle-point consensus scheme with a loopless negative-momentum gradient
  estimator and importance-sampled minibatches ("adom_vr");
* a gradient-tracking method for nonconvex finite sums with a probabilistic
  full-gradient restart estimator and multi-stage consensus ("gt_page");
* a plain full-gradient gradient-tracking baseline ("gt_baseline").

Parameter schedules are computed from problem constants, never tuned per run.
All randomness is derived counter-style from ``(seed, iteration)`` so traces
are reproducible and independent of node evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import GossipMatrix, GraphSequence, consensus_error, node_mean
from .objectives import CountingObjective, FiniteSumObjective

__all__ = [
    "AdomVrParams",
    "AdomVrState",
    "adom_vr_params",
    "adom_vr_init",
    "adom_vr_step",
    "adom_vr_estimator",
    "importance_probabilities",
    "adom_vr_iteration_budget",
    "corollary_batch_size",
    "ComplexityBudget",
    "strongly_convex_budgets",
    "nonconvex_budgets",
    "GtPageParams",
    "GtPageState",
    "gt_page_params",
    "gt_page_init",
    "gt_page_step",
    "GtBaselineState",
    "gt_baseline_init",
    "gt_baseline_step",
    "AdomVr",
    "GtPage",
    "GtBaseline",
    "RunBudgets",
    "TraceRecord",
    "RunTrace",
    "RunAbort",
    "DivergenceError",
    "run",
]

DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Parameter schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdomVrParams:
    tau0: float
    tau1: float
    tau2: float
    eta: float
    alpha: float
    nu: float
    beta: float
    sigma1: float
    sigma2: float
    theta: float
    gamma: float
    delta: float
    zeta: float
    lam: float
    p1: float
    p2: float
    b: int
    chi: float
    mu: float
    L: float
    Lbar: float
    n: int

    def validate(self) -> None:
        if not (0 < self.p1 <= 1 and 0 < self.p2 <= 1):
            raise ValueError(f"reset probabilities out of range: p1={self.p1}, p2={self.p2}")
        if self.p1 + self.p2 > 1 + 1e-12:
            raise ValueError(f"inconsistent constants: p1 + p2 = {self.p1 + self.p2} > 1")
        if self.tau0 + self.tau1 > 1 + 1e-12:
            raise ValueError(f"tau0 + tau1 = {self.tau0 + self.tau1} > 1")
        if self.nu >= self.mu:
            raise ValueError("need nu < mu for the saddle reformulation to stay strongly convex")
        for name in ("tau0", "tau1", "tau2", "eta", "alpha", "beta", "sigma1", "sigma2", "theta", "gamma", "delta", "zeta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"parameter {name} must be positive")


def adom_vr_params(mu: float, L: float, Lbar: float, chi: float, n: int, b: int) -> AdomVrParams:
    """Full parameter schedule from the problem constants.

    Requires ``b >= Lbar / L`` (the batch must be large enough for the
    variance bound behind the schedule) and consistent smoothness ordering.
    """
    if not (0 < mu <= L * (1 + 1e-12)):
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    if not (L <= Lbar * (1 + 1e-9) <= n * L * (1 + 1e-9)):
        raise ValueError(f"need L <= Lbar <= n L, got L={L}, Lbar={Lbar}, n={n}")
    if chi < 1:
        raise ValueError(f"chi must be >= 1, got {chi}")
    if b < Lbar / L * (1 - 1e-12):
        raise ValueError(f"batch size {b} violates the precondition b >= Lbar/L = {Lbar / L:.6g}")
    if not 1 <= b <= n:
        raise ValueError(f"batch size must lie in [1, n], got b={b}, n={n}")
    tau2 = min(0.5, max(1.0, math.sqrt(n) / b) * math.sqrt(mu / L))
    tau0 = Lbar / (2.0 * L * b)
    tau1 = (1.0 - tau0) / (1.0 / tau2 + 0.5)
    eta = 1.0 / (L * (tau2 + 2.0 * tau1 / (1.0 - tau1)))
    alpha = mu / 2.0
    nu = mu / 2.0
    beta = 1.0 / (2.0 * L)
    sigma2 = math.sqrt(mu) / (16.0 * chi * math.sqrt(L))
    sigma1 = 1.0 / (1.0 / sigma2 + 0.5)
    theta = nu / (4.0 * sigma2)
    gamma = nu / (14.0 * sigma2 * chi * chi)
    delta = 1.0 / (17.0 * L)
    zeta = 0.5
    lam = (n / b) * (0.5 + Lbar / (L * b * tau1))
    p1 = 1.0 / (2.0 * lam)
    p2 = Lbar / (lam * L * b * tau1)
    params = AdomVrParams(
        tau0=tau0, tau1=tau1, tau2=tau2, eta=eta, alpha=alpha, nu=nu, beta=beta,
        sigma1=sigma1, sigma2=sigma2, theta=theta, gamma=gamma, delta=delta, zeta=zeta,
        lam=lam, p1=p1, p2=p2, b=b, chi=chi, mu=mu, L=L, Lbar=Lbar, n=n,
    )
    params.validate()
    return params


def adom_vr_iteration_budget(mu: float, L: float, Lbar: float, chi: float, n: int, b: int, eps_rel: float) -> int:
    """Iterations guaranteed to shrink the squared distance by ``eps_rel``.

    Evaluates the explicit worst-case count certified for the schedule:
    ``32 max{n/b, (sqrt(n)/b) k, (n Lbar / b^2 L) k, chi k} log(1/eps)`` with
    ``k = sqrt(L/mu)``.
    """
    if not (0 < eps_rel < 1):
        raise ValueError("eps_rel must lie in (0, 1)")
    k = math.sqrt(L / mu)
    factor = max(n / b, math.sqrt(n) / b * k, n * Lbar / (b * b * L) * k, chi * k)
    return int(math.ceil(32.0 * factor * math.log(1.0 / eps_rel)))


def corollary_batch_size(mu: float, L: float, Lbar: float, n: int) -> int:
    """Batch size balancing oracle and iteration cost for the strongly convex method."""
    b = max(math.sqrt(n * Lbar / L), n * math.sqrt(mu / L))
    b = int(min(max(math.ceil(b), 1), n))
    return max(b, int(math.ceil(Lbar / L)))


@dataclass(frozen=True)
class ComplexityBudget:
    """Leading-order resource estimates (unit constants, no hidden factors)."""

    oracle_calls_per_node: float
    communications: float


def strongly_convex_budgets(mu: float, L: float, Lbar: float, chi: float, n: int, eps_rel: float) -> ComplexityBudget:
    """Oracle/communication budgets for the accelerated method at its tuned batch:
    ``(n + sqrt(n Lbar / mu)) log(1/eps)`` calls and ``chi sqrt(L/mu) log(1/eps)`` rounds."""
    if not (0 < eps_rel < 1):
        raise ValueError("eps_rel must lie in (0, 1)")
    log_term = math.log(1.0 / eps_rel)
    return ComplexityBudget(
        oracle_calls_per_node=(n + math.sqrt(n * Lbar / mu)) * log_term,
        communications=chi * math.sqrt(L / mu) * log_term,
    )


def nonconvex_budgets(L: float, Lhat: float, delta: float, chi: float, n: int, eps: float) -> ComplexityBudget:
    """Budgets to drive the squared gradient norm below ``eps**2``:
    ``n + sqrt(n) Lhat delta / eps^2`` calls and ``chi L delta / eps^2`` rounds."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return ComplexityBudget(
        oracle_calls_per_node=n + math.sqrt(n) * Lhat * delta / (eps * eps),
        communications=chi * L * delta / (eps * eps),
    )


def importance_probabilities(l_ij: np.ndarray) -> np.ndarray:
    """Per-node sampling distribution proportional to component smoothness."""
    lbar_i = l_ij.mean(axis=1, keepdims=True)
    return l_ij / (l_ij.shape[1] * lbar_i)


@dataclass(frozen=True)
class GtPageParams:
    eta: float
    p: float
    b: int
    stages: int
    chi: float
    L: float
    Lhat: float
    rho: float
    eta_strict: float

    def validate(self) -> None:
        if not (0 < self.p <= 1):
            raise ValueError(f"restart probability must be in (0, 1], got {self.p}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not (0 < self.eta <= self.rho / self.L * (1 + 1e-12)):
            raise ValueError(f"step {self.eta} outside (0, rho/L = {self.rho / self.L:.6g}]")


def _gt_page_step_bounds(L: float, Lhat: float, b: int, p: float, rho: float, contraction_sq: float = 4.0):
    """The three admissible-step bounds plus the coarse ``rho / L`` cap."""
    ct = contraction_sq
    s2 = (1.0 - p) * Lhat * Lhat / (b * p * L * L)
    bound2 = 2.0 / (L * ((1.0 + 2.0 / ct) + math.sqrt(2.0 + 8.0 / (ct * ct) + 16.0 * s2)))
    bound3 = (2.0 * rho * rho + 2.0 * ct * (rho * rho + rho) * math.sqrt(s2)) / (L * (1.0 + 2.0 * ct * s2))
    bound4 = rho**3 / (
        18.0 * ct * L * (
            12.0 + 1.0 / ct + 12.0 * ct * math.sqrt(s2)
            + math.sqrt(288.0 + 2.0 / (ct * ct) + 288.0 * ct * ct * s2 + 2.0 * s2 / (9.0 * ct))
        )
    )
    return bound2, bound3, bound4, rho / L


def gt_page_params(
    L: float,
    Lhat: float,
    chi: float,
    n: int,
    b: int | None = None,
    p: float | None = None,
    stages: int | None = None,
    strict_step: bool = False,
) -> GtPageParams:
    """Step schedule with multi-stage consensus.

    Defaults: ``b = ceil(sqrt(n) Lhat / L)`` clamped to ``[1, n]``,
    ``p = b / (n + b)``, and ``stages = ceil(chi)`` so the per-iteration
    consensus contraction is a constant (``rho = 1 - 1/e``).

    The provable admissible step is the minimum of three bounds and
    ``rho / L``; the third bound carries a ~1e-5 worst-case constant that
    makes runs inert, so by default the step is the minimum of the other
    bounds while ``eta_strict`` records the fully conservative value
    (``strict_step=True`` runs with it).
    """
    if not (0 < L <= Lhat * (1 + 1e-9) <= math.sqrt(n) * L * (1 + 1e-9)):
        raise ValueError(f"need L <= Lhat <= sqrt(n) L, got L={L}, Lhat={Lhat}, n={n}")
    if chi < 1:
        raise ValueError(f"chi must be >= 1, got {chi}")
    if b is None:
        b = int(min(max(math.ceil(math.sqrt(n) * Lhat / L), 1), n))
    if not 1 <= b <= n:
        raise ValueError(f"batch size must lie in [1, n], got b={b}")
    if p is None:
        p = b / (n + b)
    default_stages = int(math.ceil(chi))
    if stages is None:
        stages = default_stages
    rho = 1.0 - math.exp(-1.0) if stages >= default_stages else 1.0 - (1.0 - 1.0 / chi) ** stages
    bound2, bound3, bound4, cap = _gt_page_step_bounds(L, Lhat, b, p, rho)
    eta_strict = min(bound2, bound3, bound4, cap)
    eta = eta_strict if strict_step else min(bound2, bound3, cap)
    params = GtPageParams(eta=eta, p=p, b=b, stages=stages, chi=chi, L=L, Lhat=Lhat, rho=rho, eta_strict=eta_strict)
    params.validate()
    return params


# ---------------------------------------------------------------------------
# ADOM+VR state machine
# ---------------------------------------------------------------------------


@dataclass
class AdomVrState:
    x: np.ndarray
    x_f: np.ndarray
    omega: np.ndarray
    y: np.ndarray
    y_f: np.ndarray
    z: np.ndarray
    z_f: np.ndarray
    momentum: np.ndarray
    omega_grads: np.ndarray  # (m, n, d) component gradients at omega
    grad_omega: np.ndarray  # (m, d) node gradients at omega
    stale: np.ndarray  # nodes whose omega cache must be refreshed before use
    k: int = 0
    comms: int = 0


def adom_vr_init(obj: FiniteSumObjective, x0: np.ndarray | None = None) -> AdomVrState:
    """State with the dual variables in the zero-sum subspace and a fresh
    reference-point gradient cache (n oracle calls per node)."""
    m, d = obj.m, obj.d
    x = np.zeros((m, d)) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (m, d):
        raise ValueError(f"x0 must have shape {(m, d)}")
    omega_grads = np.stack([obj.local_component_gradients(i, x[i]) for i in range(m)])
    return AdomVrState(
        x=x.copy(), x_f=x.copy(), omega=x.copy(),
        y=np.zeros((m, d)), y_f=np.zeros((m, d)),
        z=np.zeros((m, d)), z_f=np.zeros((m, d)), momentum=np.zeros((m, d)),
        omega_grads=omega_grads, grad_omega=omega_grads.mean(axis=1),
        stale=np.zeros(m, dtype=bool),
    )


def adom_vr_estimator(
    obj: FiniteSumObjective,
    i: int,
    x_g_i: np.ndarray,
    indices: Sequence[int],
    probs_i: np.ndarray,
    omega_grads_i: np.ndarray,
    grad_omega_i: np.ndarray,
) -> np.ndarray:
    """Importance-weighted difference estimator for one node.

    ``(1/b) sum_j [grad f_ij(x_g) - grad f_ij(omega)] / (n p_ij)`` plus the
    cached node gradient at omega; unbiased for the node gradient at ``x_g``.
    """
    indices = np.asarray(indices, dtype=int)
    fresh = obj.sampled_gradients(i, indices, x_g_i)
    inv = 1.0 / (obj.n * probs_i[indices])
    diff = (fresh - omega_grads_i[indices]) * inv[:, None]
    return diff.mean(axis=0) + grad_omega_i


def _refresh_omega_cache(omega_grads, grad_omega, nodes, omega, obj):
    """Fresh cache arrays with the flagged nodes recomputed at their omega."""
    if not nodes.any():
        return omega_grads, grad_omega
    og, go = omega_grads.copy(), grad_omega.copy()
    for i in np.flatnonzero(nodes):
        og[i] = obj.local_component_gradients(i, omega[i])
        go[i] = og[i].mean(axis=0)
    return og, go


def adom_vr_step(
    state: AdomVrState,
    params: AdomVrParams,
    obj: FiniteSumObjective,
    gossip: GossipMatrix,
    seed: int,
    probs: np.ndarray | None = None,
    eager_refresh: bool = True,
) -> AdomVrState:
    """One full iteration (one communication round).

    The primal and dual updates are mutually implicit; they are resolved by
    the closed-form 2x2 solve per coordinate (the determinant
    ``(1+eta a)(1+theta b) + eta theta`` is always positive).
    """
    p = params
    m, n, d = obj.m, obj.n, obj.d
    if probs is None:
        probs = importance_probabilities(obj.info.L_ij)
    rng = np.random.default_rng((seed, state.k))
    batch_u = rng.random((m, p.b))
    omega_u = rng.random(m)

    # Lazy refresh mode charges deferred recomputations here instead of at reset.
    omega_grads, grad_omega = _refresh_omega_cache(state.omega_grads, state.grad_omega, state.stale, state.omega, obj)

    x_g = p.tau1 * state.x + p.tau0 * state.omega + (1.0 - p.tau1 - p.tau0) * state.x_f

    cum = np.cumsum(probs, axis=1)
    est = np.empty((m, d))
    for i in range(m):
        idx = np.searchsorted(cum[i], batch_u[i], side="right")
        np.clip(idx, 0, n - 1, out=idx)
        est[i] = adom_vr_estimator(obj, i, x_g[i], idx, probs[i], omega_grads[i], grad_omega[i])

    y_g = p.sigma1 * state.y + (1.0 - p.sigma1) * state.y_f
    z_g = p.sigma1 * state.z + (1.0 - p.sigma1) * state.z_f

    drive = est - p.nu * x_g
    r_x = state.x + p.eta * p.alpha * x_g - p.eta * drive
    r_y = state.y + p.theta * p.beta * drive - (p.theta / p.nu) * (y_g + z_g)
    det = (1.0 + p.eta * p.alpha) * (1.0 + p.theta * p.beta) + p.eta * p.theta
    x_new = ((1.0 + p.theta * p.beta) * r_x + p.eta * r_y) / det
    y_new = ((1.0 + p.eta * p.alpha) * r_y - p.theta * r_x) / det

    x_f_new = x_g + p.tau2 * (x_new - state.x)
    y_f_new = y_g + p.sigma2 * (y_new - state.y)

    omega_new = state.omega.copy()
    take_f = omega_u < p.p1
    take_g = (~take_f) & (omega_u < p.p1 + p.p2)
    omega_new[take_f] = state.x_f[take_f]
    omega_new[take_g] = x_g[take_g]
    changed = take_f | take_g

    yz = y_g + z_g
    w_yz = gossip.matrix @ yz
    mix_target = (p.gamma / p.nu) * yz + state.momentum
    w_mix = (p.gamma / p.nu) * w_yz + gossip.matrix @ state.momentum
    z_new = state.z + p.gamma * p.delta * (z_g - state.z) - w_mix
    momentum_new = mix_target - w_mix
    z_f_new = z_g - p.zeta * w_yz

    if eager_refresh:
        omega_grads, grad_omega = _refresh_omega_cache(omega_grads, grad_omega, changed, omega_new, obj)
        stale_new = np.zeros_like(changed)
    else:
        stale_new = changed

    new_state = AdomVrState(
        x=x_new, x_f=x_f_new, omega=omega_new, y=y_new, y_f=y_f_new,
        z=z_new, z_f=z_f_new, momentum=momentum_new,
        omega_grads=omega_grads, grad_omega=grad_omega, stale=stale_new,
        k=state.k + 1, comms=state.comms + 1,
    )
    _check_finite(new_state.x, new_state.k, "x")
    _check_finite(new_state.y, new_state.k, "y")
    _check_finite(new_state.z, new_state.k, "z")
    return new_state


# ---------------------------------------------------------------------------
# GT-PAGE state machine
# ---------------------------------------------------------------------------


@dataclass
class GtPageState:
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    k: int = 0
    comms: int = 0
    last_full: bool = True


def gt_page_init(obj: FiniteSumObjective, x0: np.ndarray | None = None) -> GtPageState:
    """Consensus start with tracker seeded by the full gradient (n calls per node)."""
    m, d = obj.m, obj.d
    if x0 is None:
        x = np.zeros((m, d))
    else:
        x0 = np.asarray(x0, dtype=float)
        x = np.tile(x0, (m, 1)) if x0.ndim == 1 else np.array(x0)
    if x.shape != (m, d):
        raise ValueError(f"x0 must have shape {(m, d)} or ({d},)")
    y = np.stack([obj.local_gradient(i, x[i]) for i in range(m)])
    v = np.tile(y.mean(axis=0), (m, 1))
    return GtPageState(x=x, y=y, v=v)


def _mix_stages(seq: GraphSequence, start: int, stages: int, arr: np.ndarray) -> np.ndarray:
    out = arr
    for q in range(start, start + stages):
        out = out - seq.gossip(q).matrix @ out
    return out


def gt_page_step(
    state: GtPageState,
    params: GtPageParams,
    obj: FiniteSumObjective,
    seq: GraphSequence,
    seed: int,
    per_node_coins: bool = False,
) -> GtPageState:
    """One iteration consuming ``stages`` consecutive graphs.

    The same communication rounds mix both the iterate and the tracker, so an
    iteration costs ``stages`` communications.  A single shared coin switches
    every node to a full gradient (per-node coins behind a flag).
    """
    m, n, d = obj.m, obj.n, obj.d
    rng = np.random.default_rng((seed, state.k))
    idx = rng.integers(0, n, size=(m, params.b))
    coins = rng.random(m if per_node_coins else 1)

    x_new = _mix_stages(seq, state.comms, params.stages, state.x) - params.eta * state.v

    y_new = np.empty_like(state.y)
    full_mask = coins < params.p
    for i in range(m):
        full = full_mask[i] if per_node_coins else full_mask[0]
        if full:
            y_new[i] = obj.local_gradient(i, x_new[i])
        else:
            g_new, g_old = obj.sampled_gradient_pairs(i, idx[i], x_new[i], state.x[i])
            y_new[i] = state.y[i] + (g_new - g_old).mean(axis=0)

    v_new = _mix_stages(seq, state.comms, params.stages, state.v) + y_new - state.y
    new_state = GtPageState(
        x=x_new, y=y_new, v=v_new, k=state.k + 1,
        comms=state.comms + params.stages, last_full=bool(full_mask.all()),
    )
    _check_finite(new_state.x, new_state.k, "x")
    _check_finite(new_state.v, new_state.k, "v")
    return new_state


# ---------------------------------------------------------------------------
# Gradient-tracking baseline
# ---------------------------------------------------------------------------


@dataclass
class GtBaselineState:
    x: np.ndarray
    y: np.ndarray
    grad: np.ndarray  # node gradients at the current x
    k: int = 0
    comms: int = 0


def gt_baseline_init(obj: FiniteSumObjective, x0: np.ndarray | None = None) -> GtBaselineState:
    m, d = obj.m, obj.d
    x = np.zeros((m, d)) if x0 is None else np.array(x0, dtype=float)
    grad = np.stack([obj.local_gradient(i, x[i]) for i in range(m)])
    return GtBaselineState(x=x, y=grad.copy(), grad=grad)


def gt_baseline_step(state: GtBaselineState, eta: float, obj: FiniteSumObjective, gossip: GossipMatrix) -> GtBaselineState:
    """Plain gradient tracking with full node gradients every step."""
    x_new = (state.x - gossip.matrix @ state.x) - eta * state.y
    grad_new = np.stack([obj.local_gradient(i, x_new[i]) for i in range(obj.m)])
    y_new = (state.y - gossip.matrix @ state.y) + grad_new - state.grad
    new_state = GtBaselineState(x=x_new, y=y_new, grad=grad_new, k=state.k + 1, comms=state.comms + 1)
    _check_finite(new_state.x, new_state.k, "x")
    return new_state


def _check_finite(arr: np.ndarray, k: int, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {name} at iteration {k}")
    peak = float(np.max(np.abs(arr)))
    if peak > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{name} exceeded divergence limit at iteration {k}: max |entry| = {peak:.3e}")


# ---------------------------------------------------------------------------
# Run driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdomVr:
    params: AdomVrParams
    eager_omega_refresh: bool = True

    name = "adom_vr"

    def init(self, obj: FiniteSumObjective, x0=None):
        return adom_vr_init(obj, x0)

    def step(self, state, obj, seq, seed):
        return adom_vr_step(
            state, self.params, obj, seq.gossip(state.comms), seed, eager_refresh=self.eager_omega_refresh
        )


@dataclass(frozen=True)
class GtPage:
    params: GtPageParams
    per_node_coins: bool = False

    name = "gt_page"

    def init(self, obj: FiniteSumObjective, x0=None):
        return gt_page_init(obj, x0)

    def step(self, state, obj, seq, seed):
        return gt_page_step(state, self.params, obj, seq, seed, per_node_coins=self.per_node_coins)


@dataclass(frozen=True)
class GtBaseline:
    eta: float

    name = "gt_baseline"

    def init(self, obj: FiniteSumObjective, x0=None):
        return gt_baseline_init(obj, x0)

    def step(self, state, obj, seq, seed):
        return gt_baseline_step(state, self.eta, obj, seq.gossip(state.comms))


@dataclass(frozen=True)
class RunBudgets:
    max_iterations: int
    max_communications: int | None = None
    max_oracle_calls_per_node: int | None = None

    def validate(self) -> None:
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        for v in (self.max_communications, self.max_oracle_calls_per_node):
            if v is not None and v <= 0:
                raise ValueError("budgets must be positive")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    comms: int
    oracle_calls: int
    dist_sq: float
    grad_norm_sq: float
    consensus_err: float
    avg_value: float


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def final(self) -> TraceRecord:
        return self.records[-1]


class RunAbort(RuntimeError):
    """A step failed; carries the trace collected up to the failure."""

    def __init__(self, message: str, trace: RunTrace):
        super().__init__(message)
        self.trace = trace


def run(
    method,
    obj: FiniteSumObjective,
    seq: GraphSequence,
    budgets: RunBudgets,
    metric_every: int = 1,
    seed: int = 0,
    x_star: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    progress_tracker=None,
    stop_dist_sq: float | None = None,
) -> RunTrace:
    """Drive a method against budgets, recording metrics at a fixed cadence.

    Metrics are evaluated through the raw objective so they never touch the
    oracle counters.  ``stop_dist_sq`` ends the run early once the recorded
    mean squared distance falls below it.
    """
    budgets.validate()
    if metric_every < 1:
        raise ValueError("metric_every must be >= 1")
    counting = CountingObjective(obj)
    trace = RunTrace(metadata={"method": method.name, "seed": seed, "m": obj.m, "n": obj.n, "d": obj.d})

    state = method.init(counting, x0)

    def record(st):
        xbar = node_mean(st.x)
        grad = obj.average_gradient(xbar)
        if x_star is not None:
            diff = st.x - x_star[None, :]
            dist = float(np.mean(np.sum(diff * diff, axis=1)))
        else:
            dist = float("nan")
        rec = TraceRecord(
            iteration=st.k,
            comms=st.comms,
            oracle_calls=counting.max_calls(),
            dist_sq=dist,
            grad_norm_sq=float(np.dot(grad, grad)),
            consensus_err=consensus_error(st.x),
            avg_value=obj.average_value(xbar),
        )
        trace.records.append(rec)
        return rec

    if progress_tracker is not None:
        progress_tracker.update(state.x, state.comms, counting.max_calls())
    last = record(state)

    while True:
        if state.k >= budgets.max_iterations:
            break
        if budgets.max_communications is not None and state.comms >= budgets.max_communications:
            break
        if budgets.max_oracle_calls_per_node is not None and counting.max_calls() >= budgets.max_oracle_calls_per_node:
            break
        if stop_dist_sq is not None and not math.isnan(last.dist_sq) and last.dist_sq <= stop_dist_sq:
            break
        try:
            state = method.step(state, counting, seq, seed)
        except DivergenceError as exc:
            record(state)
            raise RunAbort(str(exc), trace) from exc
        if progress_tracker is not None:
            progress_tracker.update(state.x, state.comms, counting.max_calls())
        if state.k % metric_every == 0:
            last = record(state)

    if trace.records[-1].iteration != state.k:
        record(state)
    trace.metadata["oracle_calls_per_node"] = counting.calls.tolist()
    return trace
