"""O-REPS: FTRL over occupancy measures with a negative Shannon entropy regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .learner import StepResult, _finish
from .mdp import LayeredMdp
from .solver import SolveConfig, SolveReport, solve_entropic


@dataclass(frozen=True)
class ShannonParams:
    """Learning rate: fixed ``gamma``, ``gamma / sqrt(t)``, or (gamma None) the default

    eta_t = sqrt(ln(|S||A|) / (L |S||A| t)), with |S| counting every state.
    """

    gamma: float | None = None
    fixed: bool = False

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("learning rate must be positive")

    def eta(self, mdp: LayeredMdp, t: int) -> float:
        if self.gamma is None:
            size = (mdp.num_states + 1) * mdp.num_actions
            return math.sqrt(math.log(size) / (mdp.num_layers * size * t))
        return self.gamma if self.fixed else self.gamma / math.sqrt(t)


def solve_oreps_step(
    mdp: LayeredMdp, cumulative_estimate: np.ndarray, eta: float, config: SolveConfig = SolveConfig()
) -> tuple[np.ndarray, SolveReport]:
    return solve_entropic(mdp, cumulative_estimate, eta, config)


@dataclass(frozen=True)
class OrepsState:
    mdp: LayeredMdp
    params: ShannonParams
    cumulative_estimate: np.ndarray
    t: int = 0
    q: np.ndarray | None = None
    config: SolveConfig = SolveConfig()

    @classmethod
    def start(cls, mdp: LayeredMdp, params: ShannonParams | None = None, config: SolveConfig = SolveConfig()):
        return cls(mdp, params or ShannonParams(), np.zeros(mdp.num_pairs), 0, None, config)

    def solve_next(self) -> tuple[np.ndarray, SolveReport]:
        return solve_oreps_step(self.mdp, self.cumulative_estimate, self.params.eta(self.mdp, self.t + 1), self.config)


def oreps_step(state: OrepsState, env_loss: np.ndarray, rng: np.random.Generator) -> StepResult:
    q, report = state.solve_next()
    return _finish(state, q, report, env_loss, rng)
