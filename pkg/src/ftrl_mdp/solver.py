"""Equality-constrained Newton solver for FTRL steps over the occupancy polytope.

The objective is ``<q, Lhat> + R(q)`` where R is either the hybrid
regularizer plus log-barrier or a scaled negative Shannon entropy. The
inequality constraints never bind (both regularizers blow up their gradient
at the boundary), so each step solves the bordered KKT system

    [H  A^T] [dx]   [-g     ]
    [A  0  ] [nu] = [b - A x]

after symmetric scaling by diag(q), followed by a fraction-to-the-boundary
cap and Armijo backtracking. The entropic step goes through its dual
instead: primal Newton recovers only multiplicatively from an overshoot
towards zero, which stalls when the optimum sits at 1e-40.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .mdp import DomainError, LayeredMdp, occupancy_from_policy, uniform_policy
from .regularizer import RegularizerParams

HYBRID = 0
SHANNON = 1

# status codes from the kernel
_CONVERGED, _MAX_ITER, _NONFINITE, _LINESEARCH = 0, 1, 2, 3
_STATUS = {_CONVERGED: "converged", _MAX_ITER: "max-iter", _NONFINITE: "non-finite", _LINESEARCH: "line-search"}

BOUNDARY_FRACTION = 0.99
MAX_HALVINGS = 60
ARMIJO = 1e-4


class SolverError(RuntimeError):
    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SolveConfig:
    tolerance: float = 1e-8
    max_iterations: int = 200
    warm_start: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    objective: float
    converged: bool
    status: str
    objective_history: tuple[float, ...] = ()
    feasibility: float = 0.0


# ----------------------------------------------------------------------
# numba kernel


@numba.njit(cache=True)
def _objective(kind, q, lhat, inflow, l0, A, alpha, inv_eta, beta):
    n = q.shape[0]
    val = 0.0
    for i in range(n):
        val += lhat[i] * q[i]
    if kind == HYBRID:
        qs = inflow @ q + l0
        reg = 0.0
        for i in range(n):
            r = qs[i // A] - q[i]
            if q[i] <= 0.0 or r <= 0.0:
                return np.inf
            reg -= math.sqrt(q[i]) + alpha * math.sqrt(r)
            val -= beta * math.log(q[i])
        val += inv_eta * reg
    else:
        for i in range(n):
            if q[i] < 0.0:
                return np.inf
            if q[i] > 0.0:  # 0 ln 0 = 0
                val += inv_eta * q[i] * math.log(q[i])
    return val


@numba.njit(cache=True)
def _grad_hess(q, lhat, inflow, l0, A, alpha, inv_eta, beta):
    n = q.shape[0]
    N = inflow.shape[0]
    g = lhat.copy()
    qs = inflow @ q + l0
    c1 = np.empty(n)
    c2 = np.empty(n)
    for i in range(n):
        r = qs[i // A] - q[i]
        c1[i] = 0.5 * alpha / math.sqrt(r)
        c2[i] = 0.25 * alpha / (r * math.sqrt(r))
        g[i] += inv_eta * (-0.5 / math.sqrt(q[i]) + c1[i]) - beta / q[i]
    # back-propagation of the aggregated terms through the inflow
    csum = np.zeros(N)
    for i in range(n):
        csum[i // A] += c1[i]
    g -= inv_eta * (csum @ inflow)
    # H = B^T diag(c2) B with B = repeat(inflow) - I, plus diagonal terms
    Bm = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            Bm[i, j] = inflow[i // A, j]
        Bm[i, i] -= 1.0
    for i in range(n):
        for j in range(n):
            Bm[i, j] *= math.sqrt(c2[i])
    H = inv_eta * (Bm.T @ Bm)
    for i in range(n):
        H[i, i] += inv_eta * 0.25 / (q[i] * math.sqrt(q[i])) + beta / (q[i] * q[i])
    return g, H


@numba.njit(cache=True)
def _max_step(q, dq, inflow, A):
    n = q.shape[0]
    smax = np.inf
    for i in range(n):
        if dq[i] < 0.0:
            smax = min(smax, -q[i] / dq[i])
    qs = inflow @ q
    dqs = inflow @ dq
    for i in range(n):
        s = i // A
        # r(s,a) = q(s) - q(s,a); layer-0 constant cancels in the change
        r = (qs[s] + (1.0 if s == 0 else 0.0)) - q[i]
        dr = dqs[s] - dq[i]
        if dr < 0.0:
            smax = min(smax, -r / dr)
    return smax


@numba.njit(cache=True)
def _newton(kind, q0, lhat, inflow, l0, A, Aeq, beq, proj, alpha, inv_eta, beta, tol, max_iter, frac, max_halvings):
    n = q0.shape[0]
    m = Aeq.shape[0]
    q = q0.copy()
    hist = np.full(max_iter + 1, np.nan)
    f = _objective(kind, q, lhat, inflow, l0, A, alpha, inv_eta, beta)
    hist[0] = f
    K = np.zeros((n + m, n + m))
    rhs = np.zeros(n + m)
    it = 0
    status = _MAX_ITER
    resid = np.inf
    while True:
        g, H = _grad_hess(q, lhat, inflow, l0, A, alpha, inv_eta, beta)
        resid = np.max(np.abs(proj @ g))
        feas = np.max(np.abs(Aeq @ q - beq))
        if resid <= tol and feas <= 1e-12:
            status = _CONVERGED
            break
        if it >= max_iter:
            status = _MAX_ITER
            break
        # scaled bordered system
        for i in range(n):
            for j in range(n):
                K[i, j] = q[i] * H[i, j] * q[j]
            rhs[i] = -q[i] * g[i]
        for r in range(m):
            for j in range(n):
                K[n + r, j] = Aeq[r, j] * q[j]
                K[j, n + r] = Aeq[r, j] * q[j]
            rhs[n + r] = beq[r] - Aeq[r] @ q
        sol = np.linalg.solve(K, rhs)
        dq = q * sol[:n]
        slope = g @ dq
        step = min(1.0, frac * _max_step(q, dq, inflow, A))
        # decrease below round-off of f: accept the capped step outright
        tiny = -slope < 1e-13 * (1.0 + abs(f))
        accepted = False
        for _ in range(max_halvings):
            qn = q + step * dq
            fn = _objective(kind, qn, lhat, inflow, l0, A, alpha, inv_eta, beta)
            if np.isfinite(fn) and (tiny or fn <= f + ARMIJO * step * slope):
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            status = _NONFINITE if not np.isfinite(fn) else _LINESEARCH
            break
        q = qn
        f = _objective(kind, q, lhat, inflow, l0, A, alpha, inv_eta, beta)
        hist[it] = f
    return q, it, resid, f, status, hist


@numba.njit(cache=True)
def _dual_point(u, elhat, Aeq, beq):
    z = -elhat - Aeq.T @ u - 1.0
    if np.max(z) > 700.0:
        return z, z, np.inf
    q = np.exp(z)
    return z, q, np.sum(q) + beq @ u


@numba.njit(cache=True)
def _soft_bellman(elhat, P, A):
    # w(s) = logsumexp_a(-eta Lhat(s,a) + E[w(s')] - 1) backwards over layers
    # (states are numbered layer by layer), so that the exponentials of every
    # state sum to one: a finite dual start
    N = P.shape[0]
    w = np.zeros(N + 1)
    for s in range(N - 1, -1, -1):
        x = -elhat[s * A:(s + 1) * A] + P[s] @ w - 1.0
        top = np.max(x)
        w[s] = top + math.log(np.sum(np.exp(x - top)))
    # multipliers of the flow rows enter with the opposite sign
    u = -w[:N]
    u[0] = w[0]
    return u


@numba.njit(cache=True)
def _entropic_dual(u0, elhat, Aeq, beq, proj, inv_eta, tol, max_iter, max_halvings):
    # entropic step through its dual: q(u) = exp(-eta Lhat - Aeq^T u - 1) and
    # G(u) = sum q(u) + <beq, u> is smooth, convex and unconstrained
    u = u0.copy()
    hist = np.full(max_iter + 1, np.nan)
    z, q, G = _dual_point(u, elhat, Aeq, beq)
    hist[0] = G
    it = 0
    status = _MAX_ITER
    resid = np.inf
    while True:
        if not np.isfinite(G):
            status = _NONFINITE
            break
        grad = beq - Aeq @ q
        # ln q is z exactly, even where q underflows to zero
        g = inv_eta * (elhat + z + 1.0)
        resid = np.max(np.abs(proj @ g))
        if resid <= tol and np.max(np.abs(grad)) <= 1e-12:
            status = _CONVERGED
            break
        if it >= max_iter:
            status = _MAX_ITER
            break
        H = (Aeq * q) @ Aeq.T
        du = -np.linalg.solve(H, grad)
        slope = grad @ du
        tiny = -slope < 1e-13 * (1.0 + abs(G))
        step = 1.0
        accepted = False
        for _ in range(max_halvings):
            zn, qn, Gn = _dual_point(u + step * du, elhat, Aeq, beq)
            if np.isfinite(Gn) and (tiny or Gn <= G + ARMIJO * step * slope):
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            status = _LINESEARCH
            break
        u = u + step * du
        z, q, G = zn, qn, Gn
        hist[it] = G
    return q, it, resid, status, hist


# ----------------------------------------------------------------------
# wrappers


def initial_point(mdp: LayeredMdp) -> np.ndarray:
    return occupancy_from_policy(mdp, uniform_policy(mdp))


def _check_estimate(mdp, lhat):
    lhat = np.ascontiguousarray(lhat, dtype=float)
    if lhat.shape != (mdp.num_pairs,) or not np.all(np.isfinite(lhat)):
        raise DomainError("cumulative estimate must be a finite vector over state-action pairs")
    return lhat


def _report(mdp, q, it, resid, f, status, hist):
    report = SolveReport(
        iterations=int(it),
        residual=float(resid),
        objective=float(f),
        converged=status == _CONVERGED,
        status=_STATUS[int(status)],
        objective_history=tuple(float(x) for x in hist[: it + 1]),
        feasibility=float(np.max(np.abs(mdp.eq_matrix @ q - mdp.eq_rhs))),
    )
    if not report.converged:
        raise SolverError(f"solver stopped ({report.status}) after {it} iterations, residual {resid:.3g}", report)
    return q, report


def _run(mdp, lhat, alpha, inv_eta, beta, config: SolveConfig):
    lhat = _check_estimate(mdp, lhat)
    if mdp.num_actions < 2:
        raise DomainError("the hybrid regularizer needs at least two actions")
    q0 = initial_point(mdp) if config.warm_start is None else np.array(config.warm_start, dtype=float)
    q, it, resid, f, status, hist = _newton(
        HYBRID, q0, lhat, mdp.inflow, mdp.layer0_indicator, mdp.num_actions,
        mdp.eq_matrix, mdp.eq_rhs, mdp.tangent_projector,
        float(alpha), float(inv_eta), float(beta),
        float(config.tolerance), int(config.max_iterations), BOUNDARY_FRACTION, MAX_HALVINGS,
    )
    return _report(mdp, q, it, resid, f, status, hist)


def solve_ftrl(
    mdp: LayeredMdp,
    cumulative_estimate: np.ndarray,
    params: RegularizerParams,
    t: int,
    config: SolveConfig = SolveConfig(),
) -> tuple[np.ndarray, SolveReport]:
    """q_t = argmin over the polytope of <q, Lhat> + phi_H(q)/eta_t + phi_L(q)."""
    if t < 1:
        raise DomainError("episode index starts at 1")
    return _run(mdp, cumulative_estimate, params.alpha, 1.0 / params.eta(t), params.beta, config)


def initial_occupancy(mdp: LayeredMdp, params: RegularizerParams, config: SolveConfig = SolveConfig()) -> np.ndarray:
    return solve_ftrl(mdp, np.zeros(mdp.num_pairs), params, 1, config)[0]


def solve_entropic(
    mdp: LayeredMdp, cumulative_estimate: np.ndarray, eta: float, config: SolveConfig = SolveConfig()
) -> tuple[np.ndarray, SolveReport]:
    """argmin over the polytope of <q, Lhat> + (1/eta) sum q ln q.

    Solved by Newton on the dual over the equality multipliers, started
    from a soft-Bellman pass; the history holds dual values. Entries below
    the float range come back as exact zeros. The warm start is ignored:
    the soft-Bellman start is already within a few Newton steps.
    """
    if not eta > 0:
        raise DomainError("learning rate must be positive")
    lhat = _check_estimate(mdp, cumulative_estimate)
    elhat = eta * lhat
    u0 = _soft_bellman(elhat, np.ascontiguousarray(mdp.P), mdp.num_actions)
    q, it, resid, status, hist = _entropic_dual(
        u0, elhat, mdp.eq_matrix, mdp.eq_rhs, mdp.tangent_projector, 1.0 / eta,
        float(config.tolerance), int(config.max_iterations), MAX_HALVINGS,
    )
    f = _objective(SHANNON, q, lhat, mdp.inflow, mdp.layer0_indicator, mdp.num_actions, 0.0, 1.0 / eta, 0.0)
    return _report(mdp, q, it, resid, f, status, hist)


def objective_value(mdp: LayeredMdp, q: np.ndarray, lhat: np.ndarray, params: RegularizerParams, t: int) -> float:
    return float(_objective(HYBRID, np.asarray(q, float), np.asarray(lhat, float), mdp.inflow,
                            mdp.layer0_indicator, mdp.num_actions, params.alpha, 1.0 / params.eta(t), params.beta))
