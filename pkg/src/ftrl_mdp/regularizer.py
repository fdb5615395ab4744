"""Hybrid Tsallis regularizer, log-barrier, and the structure of their Hessians.

Per-state mass q(s) is always taken through the transitions,
``q(s) = sum_{s',a'} P(s|s',a') q(s',a')`` (1 at the start state), which
agrees with ``sum_a q(s,a)`` on valid occupancy measures and gives the
Hessian its layered form off the polytope as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .mdp import DomainError, LayeredMdp

INTERIOR_TOL = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegularizerParams:
    """Hybrid weight alpha, log-barrier weight beta, learning-rate scale gamma.

    The learning rate in episode t is ``gamma / sqrt(t)``.
    """

    alpha: float
    beta: float
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise ValueError(f"alpha, beta, gamma must be positive: {self}")

    @classmethod
    def theorem1(cls, mdp: LayeredMdp) -> RegularizerParams:
        return cls(alpha=1.0 / math.sqrt(mdp.num_actions), beta=64.0 * mdp.num_layers, gamma=1.0)

    def eta(self, t: int) -> float:
        return self.gamma / math.sqrt(t)


def complement_mass(mdp: LayeredMdp, q: np.ndarray) -> np.ndarray:
    """q(s) - q(s,a) for every pair, with q(s) taken through the transitions."""
    return np.repeat(mdp.state_mass(q), mdp.num_actions) - q


def interior_violation(mdp: LayeredMdp, q: np.ndarray) -> float:
    """How far below the interior threshold q or its complements fall (<= 0 is interior)."""
    r = complement_mass(mdp, q)
    return float(INTERIOR_TOL - min(q.min(), r.min()))


def _require_interior(mdp: LayeredMdp, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if mdp.num_actions < 2:
        raise DomainError("the hybrid regularizer needs at least two actions")
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.num_pairs,):
        raise DomainError(f"occupancy has shape {q.shape}, expected ({mdp.num_pairs},)")
    r = complement_mass(mdp, q)
    if not (q.min() >= INTERIOR_TOL and r.min() >= INTERIOR_TOL):
        raise DomainError("occupancy is not strictly interior")
    return q, r


def phi_hybrid(mdp: LayeredMdp, q: np.ndarray, alpha: float, strict: bool = True) -> float:
    """-sum_{s,a} (sqrt(q(s,a)) + alpha * sqrt(q(s) - q(s,a))).

    With ``strict=False`` boundary points are accepted (the value stays
    finite there); tiny negative complements from rounding are clipped.
    """
    if strict:
        q, r = _require_interior(mdp, q)
    else:
        q = np.asarray(q, dtype=float)
        r = np.maximum(complement_mass(mdp, q), 0.0)
        q = np.maximum(q, 0.0)
    return -float(np.sqrt(q).sum() + alpha * np.sqrt(r).sum())


def phi_logbarrier(q: np.ndarray, beta: float) -> float:
    if beta == 0:
        return 0.0
    q = np.asarray(q, dtype=float)
    if q.min() <= 0:
        raise DomainError("log-barrier undefined at non-positive weights")
    return float(-beta * np.log(q).sum())


def phi_tsallis(q: np.ndarray) -> float:
    """Diagonal 1/2-Tsallis entropy -sum sqrt(q(s,a))."""
    return -float(np.sqrt(q).sum())


def hybrid_gradient(mdp: LayeredMdp, q: np.ndarray, alpha: float) -> np.ndarray:
    q, r = _require_interior(mdp, q)
    return _hybrid_gradient(mdp, q, r, alpha)


def _hybrid_gradient(mdp, q, r, alpha):
    inv_r = 0.5 * alpha / np.sqrt(r)
    # d/dq(x) of r(s,a) is inflow[s, x] - [x == (s,a)]
    back = inv_r.reshape(mdp.num_states, mdp.num_actions).sum(axis=1) @ mdp.inflow
    return -0.5 / np.sqrt(q) + inv_r - back


def psi_value(mdp: LayeredMdp, q: np.ndarray, params: RegularizerParams, t: int) -> float:
    return phi_hybrid(mdp, q, params.alpha) / params.eta(t) + phi_logbarrier(q, params.beta)


def psi_gradient(mdp: LayeredMdp, q: np.ndarray, params: RegularizerParams, t: int) -> np.ndarray:
    """Gradient of phi_H / eta_t + phi_L."""
    q, r = _require_interior(mdp, q)
    return _hybrid_gradient(mdp, q, r, params.alpha) / params.eta(t) - params.beta / q


def hessian_quadratic_form(mdp: LayeredMdp, q: np.ndarray, w: np.ndarray, alpha: float) -> float:
    """w^T (Hessian of phi_H) w without forming the matrix.

    1/4 sum_{s,a} [w(s,a)^2 q(s,a)^{-3/2} + alpha (h(s) - w(s,a))^2 (q(s)-q(s,a))^{-3/2}]
    with h(s) = sum_{s',a'} P(s|s',a') w(s',a').
    """
    q, r = _require_interior(mdp, q)
    w = np.asarray(w, dtype=float)
    h = np.repeat(mdp.inflow @ w, mdp.num_actions)
    return 0.25 * float((w * w / q**1.5).sum() + alpha * ((h - w) ** 2 / r**1.5).sum())


def hessian_coefficients(mdp: LayeredMdp, q: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal coefficients d = q^{-3/2}/4 and c = alpha (q(s)-q(s,a))^{-3/2}/4."""
    q, r = _require_interior(mdp, q)
    return 0.25 / q**1.5, 0.25 * alpha / r**1.5


def aggregation_matrix(mdp: LayeredMdp) -> np.ndarray:
    """B with (B w)(s,a) = h(s) - w(s,a)."""
    return np.repeat(mdp.inflow, mdp.num_actions, axis=0) - np.eye(mdp.num_pairs)


def hybrid_hessian(mdp: LayeredMdp, q: np.ndarray, alpha: float) -> np.ndarray:
    """Hessian of phi_H in factored form diag(d) + B^T diag(c) B."""
    d, c = hessian_coefficients(mdp, q, alpha)
    B = aggregation_matrix(mdp)
    return np.diag(d) + B.T @ (c[:, None] * B)


def hessian_assemble(mdp: LayeredMdp, q: np.ndarray, alpha: float) -> np.ndarray:
    """Dense Hessian of phi_H filled entry by entry from the closed-form second derivatives.

    Reference path for tests and diagnostics; the solver uses ``hybrid_hessian``.
    """
    q, r = _require_interior(mdp, q)
    N, A, P = mdp.num_states, mdp.num_actions, mdp.P
    n = mdp.num_pairs
    layer = mdp.layer_of
    H = np.zeros((n, n))
    c = 0.25 * alpha / r**1.5

    def downstream(s, a, s2, a2):
        # shared successors s'' (non-terminal) of (s,a) and (s2,a2)
        total = 0.0
        for s3 in range(N):
            if layer[s3] == layer[s] + 1:
                for a3 in range(A):
                    total += P[s, a, s3] * P[s2, a2, s3] * c[s3 * A + a3]
        return total

    for s in range(N):
        for a in range(A):
            i = s * A + a
            for s2 in range(N):
                for a2 in range(A):
                    j = s2 * A + a2
                    if i == j:
                        H[i, j] = 0.25 / q[i] ** 1.5 + c[i] + downstream(s, a, s, a)
                    elif layer[s2] == layer[s]:
                        H[i, j] = downstream(s, a, s2, a2)
                    elif layer[s2] == layer[s] - 1:
                        H[i, j] = -P[s2, a2, s] * c[i]
                    elif layer[s2] == layer[s] + 1:
                        H[i, j] = -P[s, a, s2] * c[j]
    return H


def psi_hessian(mdp: LayeredMdp, q: np.ndarray, params: RegularizerParams, t: int) -> np.ndarray:
    return hybrid_hessian(mdp, q, params.alpha) / params.eta(t) + np.diag(params.beta / np.asarray(q) ** 2)


def stability_norm(mdp: LayeredMdp, q: np.ndarray, lhat: np.ndarray, alpha: float) -> float:
    """lhat^T H^{-1} lhat for H the Hessian of phi_H at q (Cholesky solve)."""
    lhat = np.asarray(lhat, dtype=float)
    if not lhat.any():
        return 0.0
    H = hybrid_hessian(mdp, q, alpha)
    try:
        factor = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"Hessian is not positive definite: {exc}") from None
    return max(float(lhat @ scipy.linalg.cho_solve(factor, lhat)), 0.0)


# ----------------------------------------------------------------------
# layered inverse


@dataclass(frozen=True)
class LayeredInverseBlocks:
    """Per-layer blocks of the recursive Hessian inverse.

    ``N[k]`` is the bottom-right block of ``M_k^{-1}``; ``M[k]`` the
    recursively assembled Hessian restricted to layers 0..k and ``M_inv[k]``
    its inverse obtained through the Woodbury step.
    """

    C: list[np.ndarray]
    D: list[np.ndarray]
    W: list[np.ndarray | None]
    N: list[np.ndarray]
    M: list[np.ndarray]
    M_inv: list[np.ndarray]
    P: list[np.ndarray | None]  # P_k: U_{k-1} x U_k

    def R(self) -> np.ndarray:
        """Diagonals of the N_k concatenated in pair order."""
        return np.concatenate([np.diag(Nk) for Nk in self.N])


def _inv_checked(X: np.ndarray, layer: int) -> np.ndarray:
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSystemError(f"numerically singular block at layer {layer} (cond={cond:.3g})")
    inv = np.linalg.inv(X)
    return 0.5 * (inv + inv.T)


def layered_inverse_blocks(mdp: LayeredMdp, q: np.ndarray, alpha: float) -> LayeredInverseBlocks:
    """Build M_k, W_k and N_k layer by layer.

    M_0 = C_0 + D_0, and for k >= 1
        M_k = [[M_{k-1} + Pt C_k Pt^T, -Pt C_k], [-C_k Pt^T, C_k + D_k]]
        W_k = (C_k^{-1} + D_k^{-1} + Pt^T M_{k-1}^{-1} Pt)^{-1}
        N_k = D_k^{-1} - D_k^{-1} W_k D_k^{-1}
    where Pt embeds P_k into the rows of layers 0..k-1.
    """
    d, c = hessian_coefficients(mdp, q, alpha)
    L = mdp.num_layers
    Cs, Ds, Ws, Ns, Ms, Minvs, Ps = [], [], [], [], [], [], []
    offset = 0
    for k in range(L):
        sl = mdp.layer_pairs(k)
        Ck, Dk = np.diag(c[sl]), np.diag(d[sl])
        Cs.append(Ck)
        Ds.append(Dk)
        if k == 0:
            M = Ck + Dk
            Minv = _inv_checked(M, 0)
            Ws.append(None)
            Ns.append(Minv.copy())
            Ps.append(None)
        else:
            # rows (s', a') of layer k-1, columns (s, a) of layer k
            Pk = np.repeat(mdp.transition_block(k - 1), mdp.num_actions, axis=1)
            Ps.append(Pk)
            Pt = np.zeros((offset, Pk.shape[1]))
            Pt[offset - Pk.shape[0]:] = Pk
            M = np.block([[M + Pt @ Ck @ Pt.T, -Pt @ Ck], [-Ck @ Pt.T, Ck + Dk]])
            Dinv = np.diag(1.0 / d[sl])
            Wk = _inv_checked(np.diag(1.0 / c[sl]) + Dinv + Pt.T @ Minv @ Pt, k)
            Ws.append(Wk)
            Nk = Dinv - Dinv @ Wk @ Dinv
            Ns.append(0.5 * (Nk + Nk.T))
            top_right = Minv @ Pt @ Wk @ Dinv
            Minv = np.block([[Minv - Minv @ Pt @ Wk @ Pt.T @ Minv, top_right], [top_right.T, Ns[-1]]])
        Ms.append(M)
        Minvs.append(Minv)
        offset += sl.stop - sl.start
    return LayeredInverseBlocks(Cs, Ds, Ws, Ns, Ms, Minvs, Ps)
