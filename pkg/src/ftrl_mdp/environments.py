"""Loss generators for the stochastic, adversarial and corrupted regimes, and random MDPs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import DomainError, LayeredMdp, q_values

GAP_TOL = 1e-12


def _episode_rng(seed: int, t: int, stream: int = 0) -> np.random.Generator:
    # one independent stream per (seed, episode): random access in t
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, t)))


class Environment:
    """Interface: ``losses(t, history)`` gives the loss vector of episode t >= 1.

    ``history`` is the list of past occupancy measures; oblivious
    environments ignore it.
    """

    num_pairs: int

    def losses(self, t: int, history: Sequence[np.ndarray] = ()) -> np.ndarray:
        raise NotImplementedError

    @property
    def consumed_corruption(self) -> float:
        return 0.0


class StochasticEnv(Environment):
    """I.i.d. losses around fixed means.

    noise: "bernoulli" (default), "uniform" (mean +- width, clipped to [0, 1])
    or "none".
    """

    def __init__(self, mean_loss: np.ndarray, noise: str = "bernoulli", width: float = 0.0, seed: int = 0):
        mean_loss = np.asarray(mean_loss, dtype=float)
        if mean_loss.ndim != 1 or mean_loss.min() < 0 or mean_loss.max() > 1:
            raise DomainError("mean losses must be a vector in [0, 1]")
        if noise not in ("bernoulli", "uniform", "none"):
            raise DomainError(f"unknown noise model {noise!r}")
        if width < 0:
            raise DomainError("noise width must be non-negative")
        self.mean_loss = mean_loss
        self.noise = noise
        self.width = float(width)
        self.seed = int(seed)
        self.num_pairs = len(mean_loss)

    def losses(self, t, history=()):
        if t < 1:
            raise DomainError("episodes start at t = 1")
        m = self.mean_loss
        if self.noise == "none" or (self.noise == "uniform" and self.width == 0):
            return m.copy()
        u = _episode_rng(self.seed, t).random(self.num_pairs)
        if self.noise == "bernoulli":
            return (u < m).astype(float)
        return np.clip(m + self.width * (2.0 * u - 1.0), 0.0, 1.0)

    def expected_loss(self) -> np.ndarray:
        """Exact mean of the realized losses (clipping shifts the uniform window)."""
        if self.noise != "uniform" or self.width == 0:
            return self.mean_loss.copy()
        lo, hi, w2 = self.mean_loss - self.width, self.mean_loss + self.width, 2 * self.width
        a, b = np.clip(lo, 0, 1), np.clip(hi, 0, 1)
        # mass clipped up to 1 contributes 1 * P(X > 1); the interior part integrates x
        inner = (b**2 - a**2) / 2
        return (inner + np.maximum(hi - 1, 0.0)) / w2


class AdversarialEnv(Environment):
    """Phase-based schedules.

    ``switching``: phase j (0-based) uses ``tables[j % len(tables)]`` as loss
    means; with ``noise="bernoulli"`` losses are drawn around those means,
    otherwise the table is played as is.
    ``adaptive``: loss 1 on the action the learner's last policy plays most
    often at each state, 0 elsewhere (uses past occupancies only).
    """

    def __init__(self, kind: str, num_pairs: int, num_actions: int, phase: int = 500,
                 tables: np.ndarray | None = None, noise: str = "none", seed: int = 0):
        if kind not in ("switching", "adaptive"):
            raise DomainError(f"unknown adversary {kind!r}")
        if phase < 1:
            raise DomainError("phase length must be positive")
        self.kind = kind
        self.num_pairs = num_pairs
        self.num_actions = num_actions
        self.phase = int(phase)
        self.noise = noise
        self.seed = int(seed)
        if kind == "switching":
            if tables is None:
                raise DomainError("switching adversary needs loss tables")
            tables = np.atleast_2d(np.asarray(tables, dtype=float))
            if tables.shape[1] != num_pairs or tables.min() < 0 or tables.max() > 1:
                raise DomainError("loss tables must be rows over pairs with entries in [0, 1]")
            self.tables = tables
        if noise not in ("none", "bernoulli"):
            raise DomainError(f"unknown noise model {noise!r}")

    def table_index(self, t: int) -> int:
        return ((t - 1) // self.phase) % len(self.tables)

    def losses(self, t, history=()):
        if t < 1:
            raise DomainError("episodes start at t = 1")
        if self.kind == "switching":
            m = self.tables[self.table_index(t)]
            if self.noise == "none":
                return m.copy()
            return (_episode_rng(self.seed, t).random(self.num_pairs) < m).astype(float)
        A = self.num_actions
        loss = np.zeros(self.num_pairs)
        if len(history):
            modal = np.asarray(history[-1]).reshape(-1, A).argmax(axis=1)
        else:
            modal = np.zeros(self.num_pairs // A, dtype=int)
        loss[np.arange(len(modal)) * A + modal] = 1.0
        return loss


def switching_tables(mdp: LayeredMdp, eps: float = 0.05, seed: int = 0) -> np.ndarray:
    """Two tables around 1/2: a random deterministic policy's pairs get 1/2 - eps
    in the first and 1/2 + eps in the second, every other pair the reverse.
    """
    rng = np.random.default_rng(seed)
    choice = rng.integers(mdp.num_actions, size=mdp.num_states)
    favored = np.zeros(mdp.num_pairs, dtype=bool)
    favored[np.arange(mdp.num_states) * mdp.num_actions + choice] = True
    first = np.where(favored, 0.5 - eps, 0.5 + eps)
    second = np.where(favored, 0.5 + eps, 0.5 - eps)
    return np.vstack([first, second])


class CorruptedEnv(Environment):
    """A stochastic base whose losses are pushed toward a target until the budget runs out.

    The target puts loss 1 on the optimal action of every state and 0 on the
    rest. Each corrupted episode consumes 2 * sum_k max_{s in S_k, a}|delta|;
    the final one is scaled so that exactly the whole budget is used.
    ``placement="front"`` corrupts episodes 1, 2, ...; ``"random"`` corrupts
    each episode independently with probability ``rate``.
    """

    def __init__(self, base: StochasticEnv, mdp: LayeredMdp, budget: float,
                 placement: str = "front", rate: float = 0.1, target: np.ndarray | None = None):
        if budget < 0:
            raise DomainError("corruption budget must be non-negative")
        if placement not in ("front", "random"):
            raise DomainError(f"unknown placement {placement!r}")
        self.base = base
        self.mdp = mdp
        self.budget = float(budget)
        self.placement = placement
        self.rate = float(rate)
        self.num_pairs = base.num_pairs
        if target is None:
            choice = gap_function(base, mdp).policy
            target = np.zeros(mdp.num_pairs)
            target[np.arange(mdp.num_states) * mdp.num_actions + choice] = 1.0
        self.target = np.asarray(target, dtype=float)
        self._layer_index = [mdp.layer_pairs(k) for k in range(mdp.num_layers)]
        self._used: list[float] = [0.0]  # budget used after episode t, index t
        self._scale: list[float] = [0.0]

    def _cost(self, delta: np.ndarray) -> float:
        return 2.0 * sum(float(np.abs(delta[sl]).max()) for sl in self._layer_index)

    def _advance(self, t: int) -> None:
        while len(self._used) <= t:
            s = len(self._used)
            left = self.budget - self._used[-1]
            lam = 0.0
            if left > 0 and (self.placement == "front" or _episode_rng(self.base.seed, s, 1).random() < self.rate):
                full = self._cost(self.target - self.base.losses(s))
                if full > 0:
                    lam = min(1.0, left / full)
                    if lam < 1.0:
                        self._used.append(self.budget)
                        self._scale.append(lam)
                        continue
                    self._used.append(self._used[-1] + full)
                    self._scale.append(1.0)
                    continue
            self._used.append(self._used[-1])
            self._scale.append(lam)

    def losses(self, t, history=()):
        base = self.base.losses(t)
        self._advance(t)
        lam = self._scale[t]
        if lam == 0.0:
            return base
        if lam == 1.0:
            return self.target.copy()
        return base + lam * (self.target - base)

    def consumed_after(self, t: int) -> float:
        self._advance(t)
        return self._used[t]

    @property
    def consumed_corruption(self) -> float:
        return self._used[-1]

    def expected_loss(self) -> np.ndarray:
        return self.base.expected_loss()


def corruption_amount(mdp: LayeredMdp, realized: np.ndarray, base: np.ndarray) -> float:
    """2 * sum_t sum_k max_{s in S_k, a}|realized - base| over rows of episodes."""
    diff = np.abs(np.atleast_2d(realized) - np.atleast_2d(base))
    return float(2.0 * sum(diff[:, mdp.layer_pairs(k)].max(axis=1).sum() for k in range(mdp.num_layers)))


@dataclass(frozen=True)
class GapInfo:
    """Optimal action per state, Q-values of the optimal policy, and gaps (0 at the optimum)."""

    policy: np.ndarray
    Q: np.ndarray
    delta: np.ndarray

    @property
    def min_gap(self) -> float:
        mask = np.ones_like(self.delta, dtype=bool)
        mask[np.arange(len(self.policy)), self.policy] = False
        return float(self.delta[mask].min())


def gap_function(env: StochasticEnv, mdp: LayeredMdp) -> GapInfo:
    """Gaps Q(s,a) - Q(s, pi*(s)) for a != pi*(s), from backward induction on mean losses."""
    mean = env.expected_loss() if hasattr(env, "expected_loss") else np.asarray(env.mean_loss)
    Q, _ = q_values(mdp, mean)
    policy = Q.argmin(axis=1)
    srt = np.sort(Q, axis=1)
    if mdp.num_actions > 1 and (srt[:, 1] - srt[:, 0]).min() <= GAP_TOL:
        s = int((srt[:, 1] - srt[:, 0]).argmin())
        raise DomainError(f"gap condition violated: optimal action not unique at state {mdp.state_names[s]}")
    delta = Q - Q[np.arange(mdp.num_states), policy][:, None]
    return GapInfo(policy, Q, delta)


# ----------------------------------------------------------------------
# random instances


@dataclass(frozen=True)
class MdpGenerator:
    """Random layered MDPs.

    ``widths`` are the sizes of the inner layers 1..L-1; ``sparsity`` is the
    fraction of the next layer each pair can reach (at least one state).
    """

    widths: tuple[int, ...]
    num_actions: int
    sparsity: float = 1.0
    seed: int = 0

    def generate(self, rng: np.random.Generator | None = None) -> LayeredMdp:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        sizes = [1, *self.widths, 1]
        A = self.num_actions
        blocks = []
        for k in range(len(sizes) - 1):
            n_src, n_dst = sizes[k], sizes[k + 1]
            support = np.zeros((n_src, A, n_dst), dtype=bool)
            width = max(1, int(round(self.sparsity * n_dst)))
            for i in range(n_src):
                for a in range(A):
                    support[i, a, rng.choice(n_dst, size=width, replace=False)] = True
            # every next-layer state gets at least one incoming edge
            for j in np.flatnonzero(~support.any(axis=(0, 1))):
                support[rng.integers(n_src), rng.integers(A), j] = True
            block = np.where(support, rng.gamma(1.0, size=support.shape) + 1e-3, 0.0)
            blocks.append(block / block.sum(axis=2, keepdims=True))
        return LayeredMdp.from_blocks(blocks)


def random_policy(mdp: LayeredMdp, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(mdp.num_actions, concentration), size=mdp.num_states)


def random_means(mdp: LayeredMdp, rng: np.random.Generator) -> np.ndarray:
    return rng.random(mdp.num_pairs)


def diamond_means(gap: float = 0.3, base: float = 0.35) -> np.ndarray:
    """Mean losses for the diamond MDP: action a0 costs ``base`` and a1 ``base + gap``
    at every state, so a0 is optimal everywhere with all gaps equal to ``gap``.
    """
    return np.tile([base, base + gap], 3)
