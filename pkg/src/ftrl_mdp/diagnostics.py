"""Numerical checks of the structural lemmas behind the regret analysis.

Each check returns a LemmaReport whose ``max_violation`` is signed: the
largest value of (left side - right side) over everything checked, so a
report passes iff ``max_violation <= tolerance``.

|S| in the bounds counts the non-terminal states, which only makes the
right-hand sides smaller.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .environments import Environment, MdpGenerator, random_policy
from .learner import LearnerState, estimate_loss, step
from .mdp import (
    DomainError,
    LayeredMdp,
    Trajectory,
    deterministic_policy,
    enumerate_trajectories,
    iter_deterministic_policies,
    occupancy_from_policy,
    policy_from_occupancy,
)
from .regularizer import (
    RegularizerParams,
    hybrid_hessian,
    layered_inverse_blocks,
    phi_hybrid,
    phi_logbarrier,
    stability_norm,
)
from .solver import SolveConfig, solve_ftrl


@dataclass
class LemmaReport:
    lemma: str
    instances: int = 0
    max_violation: float = -math.inf
    tolerance: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def add(self, violation: float, count: int = 1) -> None:
        self.instances += count
        self.max_violation = max(self.max_violation, float(violation))

    def merge(self, other: LemmaReport) -> LemmaReport:
        self.instances += other.instances
        self.max_violation = max(self.max_violation, other.max_violation)
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _mappings(mdp: LayeredMdp, policies: Iterable[Sequence[int]] | None) -> list[np.ndarray]:
    if policies is None:
        policies = iter_deterministic_policies(mdp)
    return [np.asarray(p, dtype=int) for p in policies]


def _off_policy_mask(mdp: LayeredMdp, choice: np.ndarray) -> np.ndarray:
    mask = np.ones(mdp.num_pairs, dtype=bool)
    mask[np.arange(mdp.num_states) * mdp.num_actions + choice] = False
    return mask


# ----------------------------------------------------------------------
# smooth update


@dataclass(frozen=True)
class EpisodeRecord:
    """q_t played in episode t, the estimate after it, and the realized loss."""

    t: int
    q: np.ndarray
    cumulative_estimate: np.ndarray
    loss: np.ndarray
    trajectory: Trajectory


def record_run(mdp: LayeredMdp, env: Environment, params: RegularizerParams, T: int, seed: int,
               config: SolveConfig = SolveConfig()) -> list[EpisodeRecord]:
    from .harness import learner_rng

    state = LearnerState.start(mdp, params, config)
    rng = learner_rng(seed)
    out = []
    for t in range(1, T + 1):
        loss = env.losses(t, () if state.q is None else (state.q,))
        res = step(state, loss, rng)
        state = res.state
        out.append(EpisodeRecord(t, res.q, state.cumulative_estimate, loss, res.trajectory))
    return out


def check_smooth_update(mdp: LayeredMdp, records: Sequence[EpisodeRecord], params: RegularizerParams,
                        config: SolveConfig = SolveConfig(), tolerance: float = 1e-9) -> LemmaReport:
    """1/2 q_t <= tilde q_t <= 2 q_t with tilde q_t minimising <q, Lhat_t> + psi_t.

    Violation is measured on the ratio tilde q_t / q_t.
    """
    rep = LemmaReport("smooth_update", tolerance=tolerance)
    lo, hi = math.inf, 0.0
    for rec in records:
        cfg = SolveConfig(config.tolerance, config.max_iterations, warm_start=rec.q)
        q_tilde, _ = solve_ftrl(mdp, rec.cumulative_estimate, params, rec.t, cfg)
        ratio = q_tilde / rec.q
        lo, hi = min(lo, ratio.min()), max(hi, ratio.max())
        rep.add(max(0.5 - ratio.min(), ratio.max() - 2.0))
    rep.details.update(min_ratio=float(lo), max_ratio=float(hi), beta=params.beta)
    return rep


def check_consecutive_ratio(records: Sequence[EpisodeRecord], factor: float = 3.0) -> LemmaReport:
    """q_{t+1} / q_t within [1/factor, factor] along a run."""
    rep = LemmaReport("consecutive_ratio", tolerance=0.0)
    for a, b in zip(records, records[1:]):
        ratio = b.q / a.q
        rep.add(max(1.0 / factor - ratio.min(), ratio.max() - factor))
    return rep


# ----------------------------------------------------------------------
# penalty


def penalty_rhs(mdp: LayeredMdp, q_t: np.ndarray, q_ring: np.ndarray, alpha: float, choice: np.ndarray) -> float:
    off = _off_policy_mask(mdp, choice)
    S, L, A = mdp.num_states, mdp.num_layers, mdp.num_actions
    first = (1 + alpha) * np.sqrt(q_t[off]).sum()
    inner = float((q_t[off] + q_ring[off]).sum())
    return float(first + (1 + alpha * A) * math.sqrt(S * L) * min(1.0, 2 * math.sqrt(inner)))


def check_penalty_bound(mdp: LayeredMdp, q_t: np.ndarray, q_ring: np.ndarray, alpha: float,
                        policies: Iterable[Sequence[int]] | None = None, tolerance: float = 1e-12) -> LemmaReport:
    """phi_H(q_ring) - phi_H(q_t) against the penalty bound, for every mapping pi given
    (all deterministic mappings by default)."""
    rep = LemmaReport("penalty_bound", tolerance=tolerance)
    lhs = phi_hybrid(mdp, q_ring, alpha, strict=False) - phi_hybrid(mdp, q_t, alpha)
    for choice in _mappings(mdp, policies):
        rep.add(lhs - penalty_rhs(mdp, q_t, q_ring, alpha, choice))
    return rep


def _sqrt_state_mass(mdp: LayeredMdp, q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(q.reshape(mdp.num_states, mdp.num_actions).sum(axis=1), 0.0))


def check_sqrt_diff(mdp: LayeredMdp, policy1: np.ndarray, choice2: Sequence[int], tolerance: float = 1e-12) -> LemmaReport:
    """sum_s sqrt q1(s) - sqrt q2(s) <= sqrt(|S| L) sqrt(sum_{a != pi2(s)} q1(s,a)),
    pi1 any policy, pi2 deterministic."""
    choice2 = np.asarray(choice2, dtype=int)
    q1 = occupancy_from_policy(mdp, policy1)
    q2 = occupancy_from_policy(mdp, deterministic_policy(mdp, choice2))
    lhs = float((_sqrt_state_mass(mdp, q1) - _sqrt_state_mass(mdp, q2)).sum())
    rhs = math.sqrt(mdp.num_states * mdp.num_layers) * math.sqrt(q1[_off_policy_mask(mdp, choice2)].sum())
    rep = LemmaReport("sqrt_diff", tolerance=tolerance)
    rep.add(lhs - rhs)
    return rep


def check_sqrt_diff_deterministic(mdp: LayeredMdp, choice1: Sequence[int], choice2: Sequence[int],
                                  tolerance: float = 1e-12) -> LemmaReport:
    """Same left side for two deterministic policies, with the off-policy mass of q2 under pi1."""
    choice1 = np.asarray(choice1, dtype=int)
    q1 = occupancy_from_policy(mdp, deterministic_policy(mdp, choice1))
    q2 = occupancy_from_policy(mdp, deterministic_policy(mdp, choice2))
    lhs = float((_sqrt_state_mass(mdp, q1) - _sqrt_state_mass(mdp, q2)).sum())
    rhs = math.sqrt(mdp.num_states * mdp.num_layers) * math.sqrt(q2[_off_policy_mask(mdp, choice1)].sum())
    rep = LemmaReport("sqrt_diff_deterministic", tolerance=tolerance)
    rep.add(lhs - rhs)
    return rep


# ----------------------------------------------------------------------
# stability


def expected_stability_norm(mdp: LayeredMdp, q: np.ndarray, loss: np.ndarray, alpha: float,
                            limit: int = 10_000) -> float:
    """E ||lhat||^2 under the inverse Hessian of phi_H at q, by exact trajectory enumeration."""
    policy = policy_from_occupancy(mdp, q)
    total = 0.0
    for prob, states, actions in enumerate_trajectories(mdp, policy, limit):
        traj = Trajectory(states, actions, tuple(float(loss[s * mdp.num_actions + a]) for s, a in zip(states, actions)))
        total += prob * stability_norm(mdp, q, estimate_loss(mdp, traj, q), alpha)
    return total


def stability_rhs(mdp: LayeredMdp, q: np.ndarray, alpha: float, choice: np.ndarray) -> float:
    L, S, A = mdp.num_layers, mdp.num_states, mdp.num_actions
    second = 8 * math.e * L**2 * (math.sqrt(L) + 1 / (alpha * L)) * np.sqrt(q[_off_policy_mask(mdp, choice)]).sum()
    return float(min(4 * math.sqrt(L * S * A), second))


def check_stability_bound(mdp: LayeredMdp, q: np.ndarray, loss: np.ndarray, alpha: float,
                          policies: Iterable[Sequence[int]] | None = None, tolerance: float = 1e-10,
                          limit: int = 10_000) -> LemmaReport:
    rep = LemmaReport("stability_bound", tolerance=tolerance)
    value = expected_stability_norm(mdp, q, loss, alpha, limit)
    for choice in _mappings(mdp, policies):
        rep.add(value - stability_rhs(mdp, q, alpha, choice))
    rep.details["expected_norm"] = value
    return rep


# ----------------------------------------------------------------------
# comparator


def check_comparator(mdp: LayeredMdp, q_ring: np.ndarray, q1: np.ndarray, T: int, alpha: float, beta: float,
                     tolerance: float = 1e-10) -> LemmaReport:
    """v = (1 - 1/T) q_ring + q1 / T against the log-barrier and hybrid comparator bounds.

    The log-barrier bound is written as beta * #pairs * log T, which is the
    stated 64 L |S||A| log T at beta = 64 L.
    """
    if T < 2:
        raise DomainError("the comparator bounds need T >= 2")
    v = (1 - 1 / T) * q_ring + q1 / T
    rep = LemmaReport("comparator", tolerance=tolerance)
    n = mdp.num_pairs
    barrier = phi_logbarrier(v, beta) - phi_logbarrier(q1, beta) - beta * n * math.log(T)
    hybrid = phi_hybrid(mdp, v, alpha, strict=False) - phi_hybrid(mdp, q_ring, alpha, strict=False) - (1 + alpha) * n / T
    rep.add(barrier)
    rep.add(hybrid)
    rep.details.update(barrier_slack=-barrier, hybrid_slack=-hybrid)
    return rep


# ----------------------------------------------------------------------
# layered inverse


def _psd_violation(X: np.ndarray) -> float:
    """-lambda_min(X), relative to the scale of X."""
    X = 0.5 * (X + X.T)
    return float(-np.linalg.eigvalsh(X)[0] / max(1.0, np.abs(X).max()))


def check_hessian_inverse_chain(mdp: LayeredMdp, q: np.ndarray, alpha: float, rng: np.random.Generator,
                                draws: int = 4, tolerance: float = 1e-8) -> LemmaReport:
    """H = M_{L-1}; w^T H^{-1} w <= w_k^T N_k w_k for layer-supported w; both N_k dominations."""
    rep = LemmaReport("hessian_inverse_chain", tolerance=tolerance)
    blocks = layered_inverse_blocks(mdp, q, alpha)
    H = hybrid_hessian(mdp, q, alpha)
    rep.add(np.abs(blocks.M[-1] - H).max() / np.abs(H).max())
    Hinv = np.linalg.inv(H)
    for k in range(mdp.num_layers):
        sl = mdp.layer_pairs(k)
        Nk = blocks.N[k]
        for _ in range(draws):
            wk = rng.normal(size=sl.stop - sl.start)
            w = np.zeros(mdp.num_pairs)
            w[sl] = wk
            lhs, rhs = w @ Hinv @ w, wk @ Nk @ wk
            rep.add((lhs - rhs) / max(1.0, abs(rhs)))
        rep.add(_psd_violation(np.linalg.inv(blocks.D[k]) - Nk))
        if k > 0:
            Pk = blocks.P[k]
            rep.add(_psd_violation(np.linalg.inv(blocks.C[k]) + Pk.T @ blocks.N[k - 1] @ Pk - Nk))
        rep.add(_psd_violation(Nk))
    return rep


# ----------------------------------------------------------------------
# suite


def random_interior_occupancy(mdp: LayeredMdp, rng: np.random.Generator) -> np.ndarray:
    return occupancy_from_policy(mdp, random_policy(mdp, rng))


def random_instance(rng: np.random.Generator, max_layers: int = 3, max_width: int = 3, max_actions: int = 3) -> LayeredMdp:
    L = int(rng.integers(1, max_layers + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=L - 1))
    A = int(rng.integers(2, max_actions + 1))
    return MdpGenerator(widths, A, float(rng.uniform(0.3, 1.0))).generate(rng)


def lemma_suite(mdp: LayeredMdp, env: Environment, params: RegularizerParams, episodes: int = 500,
                instances: int = 100, seed: int = 0, config: SolveConfig = SolveConfig()) -> dict[str, LemmaReport]:
    """All lemma checks along one learner run on ``mdp`` plus random instances."""
    from .mdp import best_fixed_policy

    records = record_run(mdp, env, params, episodes, seed, config)
    alpha = params.alpha
    reports = {
        "smooth_update": check_smooth_update(mdp, records, params, config),
        "consecutive_ratio": check_consecutive_ratio(records),
    }
    cum_loss = np.sum([r.loss for r in records], axis=0)
    q_ring = occupancy_from_policy(mdp, best_fixed_policy(mdp, cum_loss)[0])
    policies = _mappings(mdp, None)
    pen = LemmaReport("penalty_bound", tolerance=1e-12)
    stab = LemmaReport("stability_bound", tolerance=1e-10)
    for rec in records:
        pen.merge(check_penalty_bound(mdp, rec.q, q_ring, alpha, policies))
        stab.merge(check_stability_bound(mdp, rec.q, rec.loss, alpha, policies))
    q1 = records[0].q
    comp = check_comparator(mdp, q_ring, q1, episodes, alpha, params.beta)
    sqrt_c4 = LemmaReport("sqrt_diff", tolerance=1e-12)
    sqrt_c5 = LemmaReport("sqrt_diff_deterministic", tolerance=1e-12)
    chain = LemmaReport("hessian_inverse_chain", tolerance=1e-8)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    for _ in range(instances):
        inst = random_instance(rng)
        a = 1 / math.sqrt(inst.num_actions)
        q = random_interior_occupancy(inst, rng)
        c1 = rng.integers(inst.num_actions, size=inst.num_states)
        c2 = rng.integers(inst.num_actions, size=inst.num_states)
        q_det = occupancy_from_policy(inst, deterministic_policy(inst, c1))
        inst_policies = _mappings(inst, None) if inst.num_actions ** inst.num_states <= 4096 else [c1, c2]
        pen.merge(check_penalty_bound(inst, q, q_det, a, inst_policies))
        stab.merge(check_stability_bound(inst, q, rng.random(inst.num_pairs), a, inst_policies))
        stab.merge(check_stability_bound(inst, q, np.ones(inst.num_pairs), a, inst_policies))
        T = int(rng.integers(2, 10**6))
        q1_inst = solve_ftrl(inst, np.zeros(inst.num_pairs), RegularizerParams(a, 64.0 * inst.num_layers), 1)[0]
        comp.merge(check_comparator(inst, q_det, q1_inst, T, a, 64.0 * inst.num_layers))
        sqrt_c4.merge(check_sqrt_diff(inst, random_policy(inst, rng), c2))
        sqrt_c5.merge(check_sqrt_diff_deterministic(inst, c1, c2))
        chain.merge(check_hessian_inverse_chain(inst, q, a, rng))
    reports.update(penalty_bound=pen, stability_bound=stab, comparator=comp, sqrt_diff=sqrt_c4,
                   sqrt_diff_deterministic=sqrt_c5, hessian_inverse_chain=chain)
    return reports
