"""The FTRL learner loop: solve, act, estimate, accumulate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mdp import DomainError, LayeredMdp, Trajectory, policy_from_occupancy, sample_trajectory
from .regularizer import INTERIOR_TOL, RegularizerParams
from .solver import SolveConfig, SolveReport, solve_ftrl


def estimate_loss(mdp: LayeredMdp, traj: Trajectory, q: np.ndarray) -> np.ndarray:
    """Importance-weighted estimate: loss / q at the visited pairs, zero elsewhere."""
    lhat = np.zeros(mdp.num_pairs)
    for i, loss in zip(traj.pairs(mdp.num_actions), traj.losses):
        if q[i] < INTERIOR_TOL:
            raise DomainError(f"visited pair {i} has occupancy {q[i]!r} below the interior threshold")
        lhat[i] = loss / q[i]
    return lhat


@dataclass(frozen=True)
class LearnerState:
    """Everything carried between episodes. ``t`` counts completed episodes."""

    mdp: LayeredMdp
    params: RegularizerParams
    cumulative_estimate: np.ndarray
    t: int = 0
    q: np.ndarray | None = None
    config: SolveConfig = SolveConfig()

    @classmethod
    def start(cls, mdp: LayeredMdp, params: RegularizerParams | None = None, config: SolveConfig = SolveConfig()):
        params = params or RegularizerParams.theorem1(mdp)
        return cls(mdp, params, np.zeros(mdp.num_pairs), 0, None, config)

    def solve_next(self) -> tuple[np.ndarray, SolveReport]:
        """Occupancy for episode t+1, warm-started from the previous one."""
        cfg = replace(self.config, warm_start=self.q)
        return solve_ftrl(self.mdp, self.cumulative_estimate, self.params, self.t + 1, cfg)


@dataclass(frozen=True)
class StepResult:
    trajectory: Trajectory
    estimate: np.ndarray
    state: LearnerState
    q: np.ndarray
    report: SolveReport


def step(state: LearnerState, env_loss: np.ndarray, rng: np.random.Generator) -> StepResult:
    """One episode of the hybrid learner.

    The full loss vector is only used to look up losses along the sampled
    trajectory.
    """
    q, report = state.solve_next()
    return _finish(state, q, report, env_loss, rng)


def _finish(state, q, report, env_loss, rng):
    mdp = state.mdp
    traj = sample_trajectory(mdp, policy_from_occupancy(mdp, q), env_loss, rng)
    lhat = estimate_loss(mdp, traj, q)
    new = replace(state, cumulative_estimate=state.cumulative_estimate + lhat, t=state.t + 1, q=q)
    return StepResult(traj, lhat, new, q, report)
