"""Layered episodic MDPs and occupancy-measure algebra.

Every array indexed by state-action pairs uses one fixed order: non-terminal
states sorted by (layer, insertion order), actions by index, flattened as
``state_index * num_actions + action``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

STRUCT_TOL = 1e-12
DERIVED_TOL = 1e-9


class MdpError(ValueError):
    """Raised for malformed MDP definitions."""


class DomainError(ValueError):
    """Raised when an argument lies outside an operation's domain."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class LayeredMdp:
    """A loop-free episodic MDP with known transitions.

    Parameters
    ----------
    layers:
        ``layers[k]`` lists the state names of layer k, for k = 0..L. The
        first and last layers must each hold exactly one state.
    num_actions:
        Size of the action set; actions are the integers ``0..num_actions-1``.
    transition:
        Mapping ``(s, a, s_next) -> probability``. Missing entries are zero.
        ``s_next`` must lie in the layer right after ``s``.
    """

    def __init__(
        self,
        layers: Sequence[Sequence[str]],
        num_actions: int,
        transition: Mapping[tuple[str, int, str], float],
    ):
        if len(layers) < 2:
            raise MdpError("need at least two layers (L >= 1)")
        if len(layers[0]) != 1 or len(layers[-1]) != 1:
            raise MdpError("first and last layers must be singletons")
        if num_actions < 1:
            raise MdpError("need at least one action")
        names = [str(s) for layer in layers for s in layer]
        if len(set(names)) != len(names):
            raise MdpError("duplicate state names")

        self.num_layers = len(layers) - 1
        self.num_actions = int(num_actions)
        self.state_names: tuple[str, ...] = tuple(names)
        self._index = {s: i for i, s in enumerate(names)}
        layer_of = np.concatenate([np.full(len(layer), k) for k, layer in enumerate(layers)])
        self.layer_of = _frozen(layer_of.astype(np.int64))
        self.layer_sizes = tuple(len(layer) for layer in layers)
        n_total = len(names)
        self.num_states = n_total - 1  # non-terminal states
        self.terminal = n_total - 1

        P = np.zeros((self.num_states, self.num_actions, n_total))
        for (s, a, s2), p in transition.items():
            if s not in self._index or s2 not in self._index:
                raise MdpError(f"unknown state in transition ({s}, {a}, {s2})")
            i, j = self._index[s], self._index[s2]
            if not 0 <= int(a) < self.num_actions:
                raise MdpError(f"action {a} out of range")
            if i == self.terminal:
                raise MdpError("the terminal state has no outgoing transitions")
            if self.layer_of[j] != self.layer_of[i] + 1:
                raise MdpError(f"transition {s} -> {s2} skips or reverses a layer")
            if not np.isfinite(p) or p < 0:
                raise MdpError(f"invalid probability {p} for ({s}, {a}, {s2})")
            P[i, int(a), j] += float(p)
        self._init_arrays(P)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray], names: Sequence[Sequence[str]] | None = None) -> LayeredMdp:
        """Build from per-layer kernels ``blocks[k][i, a, j] = P(s_{k+1,j} | s_{k,i}, a)``."""
        sizes = [np.shape(blocks[0])[0]] + [np.shape(b)[2] for b in blocks]
        if names is None:
            names = [[f"s{k}_{i}" for i in range(n)] for k, n in enumerate(sizes)]
        num_actions = np.shape(blocks[0])[1]
        trans = {}
        for k, b in enumerate(blocks):
            b = np.asarray(b, dtype=float)
            if b.shape != (sizes[k], num_actions, sizes[k + 1]):
                raise MdpError(f"block {k} has shape {b.shape}")
            for i, a, j in zip(*np.nonzero(b)):
                trans[(names[k][i], int(a), names[k + 1][j])] = b[i, a, j]
        return cls(names, num_actions, trans)

    def _init_arrays(self, P: np.ndarray) -> None:
        N, A = self.num_states, self.num_actions
        sums = P.sum(axis=2)
        bad = np.abs(sums - 1.0) > STRUCT_TOL
        if bad.any():
            i, a = np.argwhere(bad)[0]
            raise MdpError(
                f"P(.|{self.state_names[i]}, {a}) sums to {sums[i, a]!r}, not 1"
            )
        self.P = _frozen(P)

        # "max over actions" forward pass: a state is reachable iff some
        # predecessor pair reaches it with positive probability
        reach = np.zeros(N + 1, dtype=bool)
        reach[0] = True
        for k in range(self.num_layers):
            for i in self.states_in_layer(k):
                if reach[i]:
                    reach |= (P[i] > 0).any(axis=0)
        if not reach.all():
            missing = [self.state_names[i] for i in np.flatnonzero(~reach)]
            raise MdpError(f"unreachable states: {missing}")

        self.num_pairs = N * A
        self.pair_layer = _frozen(np.repeat(self.layer_of[:N], A))
        # inflow[s, (s', a')] = P(s | s', a'); rows of layer-0 are zero
        inflow = P[:, :, :N].reshape(N * A, N).T
        self.inflow = _frozen(inflow.copy())
        self.layer0_indicator = _frozen((self.layer_of[:N] == 0).astype(float))

        # Omega equality constraints without redundancy: normalisation of
        # layer 0 plus flow conservation for every state in layers 1..L-1
        rows = [np.where(self.pair_layer == 0, 1.0, 0.0)]
        rhs = [1.0]
        for s in range(1, N):
            row = inflow[s].copy()
            row[s * A:(s + 1) * A] -= 1.0
            rows.append(row)
            rhs.append(0.0)
        self.eq_matrix = _frozen(np.array(rows))
        self.eq_rhs = _frozen(np.array(rhs))
        Aeq = self.eq_matrix
        self.tangent_projector = _frozen(
            np.eye(self.num_pairs) - Aeq.T @ np.linalg.solve(Aeq @ Aeq.T, Aeq)
        )

    # ------------------------------------------------------------------
    def state_index(self, name: str) -> int:
        return self._index[name]

    def pair_index(self, state: str | int, action: int) -> int:
        s = self._index[state] if isinstance(state, str) else int(state)
        return s * self.num_actions + int(action)

    def states_in_layer(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.layer_of == k)

    def layer_pairs(self, k: int) -> slice:
        states = self.states_in_layer(k)
        A = self.num_actions
        return slice(states[0] * A, (states[-1] + 1) * A)

    def transition_block(self, k: int) -> np.ndarray:
        """``P_k[(s,a), s']`` for s in layer k and s' in layer k+1."""
        src = self.states_in_layer(k)
        dst = self.states_in_layer(k + 1)
        return self.P[src[0]:src[-1] + 1, :, dst[0]:dst[-1] + 1].reshape(-1, len(dst))

    def __repr__(self) -> str:
        return f"LayeredMdp(L={self.num_layers}, layers={self.layer_sizes}, |A|={self.num_actions})"

    # ------------------------------------------------------------------
    def state_mass(self, q: np.ndarray) -> np.ndarray:
        """Per-state mass computed through the inflow (1 for the start state)."""
        return self.inflow @ q + self.layer0_indicator

    def occupancy_violation(self, q: np.ndarray) -> float:
        """Largest violation of normalisation, flow conservation or non-negativity."""
        q = np.asarray(q, dtype=float)
        N, A = self.num_states, self.num_actions
        qs = q.reshape(N, A).sum(axis=1)
        norm = np.array([qs[self.layer_of[:N] == k].sum() - 1.0 for k in range(self.num_layers)])
        flow = (self.inflow @ q)[1:] - qs[1:]
        return float(max(np.abs(norm).max(), np.abs(flow).max(initial=0.0), -q.min(), 0.0))

    def is_occupancy(self, q: np.ndarray, tol: float = DERIVED_TOL) -> bool:
        return np.shape(q) == (self.num_pairs,) and self.occupancy_violation(q) <= tol


@dataclass(frozen=True)
class Trajectory:
    """One episode: ``states[k]`` lies in layer k, actions and losses per step."""

    states: tuple[int, ...]
    actions: tuple[int, ...]
    losses: tuple[float, ...]

    def pairs(self, num_actions: int) -> list[int]:
        return [s * num_actions + a for s, a in zip(self.states, self.actions)]


@dataclass(frozen=True)
class ReachabilityProbability:
    """``values[s, a, s2]``: chance of reaching s2 after playing a at s, then following the policy."""

    values: np.ndarray


def uniform_policy(mdp: LayeredMdp) -> np.ndarray:
    return np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)


def deterministic_policy(mdp: LayeredMdp, choice: Sequence[int]) -> np.ndarray:
    pi = np.zeros((mdp.num_states, mdp.num_actions))
    pi[np.arange(mdp.num_states), np.asarray(choice, dtype=int)] = 1.0
    return pi


def iter_deterministic_policies(mdp: LayeredMdp) -> Iterator[tuple[int, ...]]:
    """All |A|^(#non-terminal states) deterministic mappings, as action tuples."""
    return itertools.product(range(mdp.num_actions), repeat=mdp.num_states)


def check_policy(mdp: LayeredMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.num_states, mdp.num_actions):
        raise DomainError(f"policy shape {policy.shape} != {(mdp.num_states, mdp.num_actions)}")
    if (policy < 0).any() or np.abs(policy.sum(axis=1) - 1.0).max() > STRUCT_TOL:
        raise DomainError("policy rows must be probability vectors")
    return policy


def occupancy_from_policy(mdp: LayeredMdp, policy: np.ndarray) -> np.ndarray:
    """Forward dynamic programming: q(s,a) = Pr[visit s] * pi(a|s)."""
    policy = check_policy(mdp, policy)
    N = mdp.num_states
    mass = np.zeros(N + 1)
    mass[0] = 1.0
    q = np.zeros((N, mdp.num_actions))
    for k in range(mdp.num_layers):
        for s in mdp.states_in_layer(k):
            q[s] = mass[s] * policy[s]
            mass += q[s] @ mdp.P[s]
    return q.ravel()


def policy_from_occupancy(mdp: LayeredMdp, q: np.ndarray) -> np.ndarray:
    """Normalise q per state; states carrying no mass get the uniform row."""
    q = np.asarray(q, dtype=float).reshape(mdp.num_states, mdp.num_actions)
    mass = q.sum(axis=1, keepdims=True)
    pi = np.full_like(q, 1.0 / mdp.num_actions)
    reached = mass[:, 0] > 0
    pi[reached] = q[reached] / mass[reached]
    return pi


def expected_loss(q: np.ndarray, loss: np.ndarray) -> float:
    return float(np.dot(q, loss))


def convex_combine(q1: np.ndarray, q2: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"mixing weight {lam} outside [0, 1]")
    return lam * np.asarray(q1) + (1.0 - lam) * np.asarray(q2)


def sample_trajectory(
    mdp: LayeredMdp, policy: np.ndarray, loss: np.ndarray, rng: np.random.Generator
) -> Trajectory:
    """Roll out one episode.

    Exactly 2L uniforms are drawn per episode (action, then next state, per
    step) and inverted through the CDFs. Two learners fed the same stream
    therefore share common random numbers.
    """
    u = rng.random(2 * mdp.num_layers)
    return _rollout(mdp, policy, loss, u)


def _rollout(mdp: LayeredMdp, policy: np.ndarray, loss: np.ndarray, u: np.ndarray) -> Trajectory:
    A = mdp.num_actions
    s = 0
    states, actions, losses = [], [], []
    for k in range(mdp.num_layers):
        a = _invert_cdf(policy[s], u[2 * k])
        states.append(s)
        actions.append(a)
        losses.append(float(loss[s * A + a]))
        s = _invert_cdf(mdp.P[s, a], u[2 * k + 1])
    return Trajectory(tuple(states), tuple(actions), tuple(losses))


def _invert_cdf(p: np.ndarray, u: float) -> int:
    cdf = np.cumsum(p)
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # guard against landing on a zero-probability entry at the right edge
    while i >= len(p) or p[i] == 0:
        i -= 1
    return i


def enumerate_trajectories(
    mdp: LayeredMdp, policy: np.ndarray, limit: int = 10_000
) -> list[tuple[float, tuple[int, ...], tuple[int, ...]]]:
    """All positive-probability (probability, states, actions) paths.

    Refuses instances with more than ``limit`` paths instead of sampling.
    """
    paths = [(1.0, (0,), ())]
    for k in range(mdp.num_layers):
        nxt = []
        for prob, states, actions in paths:
            s = states[-1]
            for a in np.flatnonzero(policy[s] > 0):
                pa = prob * policy[s, a]
                for s2 in np.flatnonzero(mdp.P[s, a] > 0):
                    nxt.append((pa * mdp.P[s, a, s2], states + (int(s2),), actions + (int(a),)))
            if len(nxt) > limit:
                raise DomainError(f"more than {limit} trajectories; refusing to enumerate")
        paths = nxt
    return [(p, st[:-1], ac) for p, st, ac in paths]


def reachability(mdp: LayeredMdp, policy: np.ndarray) -> ReachabilityProbability:
    """Reachability probabilities via the three-case layered recursion."""
    policy = check_policy(mdp, policy)
    N, A = mdp.num_states, mdp.num_actions
    # state-to-state kernel under the policy
    kernel = np.einsum("sa,sat->st", policy, mdp.P)
    p = np.zeros((N, A, N + 1))
    for s in range(N):
        k = mdp.layer_of[s]
        for a in range(A):
            row = mdp.P[s, a].copy()
            p[s, a] += row
            for _ in range(k + 1, mdp.num_layers):
                row = row[:N] @ kernel
                p[s, a] += row
    return ReachabilityProbability(p)


def best_fixed_policy(mdp: LayeredMdp, cumulative_loss: np.ndarray) -> tuple[np.ndarray, float]:
    """Backward induction on cumulative losses; ties go to the lowest action index."""
    N, A = mdp.num_states, mdp.num_actions
    c = np.asarray(cumulative_loss, dtype=float).reshape(N, A)
    V = np.zeros(N + 1)
    choice = np.zeros(N, dtype=int)
    for k in range(mdp.num_layers - 1, -1, -1):
        for s in mdp.states_in_layer(k):
            Q = c[s] + mdp.P[s] @ V
            choice[s] = int(np.argmin(Q))
            V[s] = Q[choice[s]]
    return deterministic_policy(mdp, choice), float(V[0])


def q_values(mdp: LayeredMdp, loss: np.ndarray, policy: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Q and V under ``policy`` (optimal policy when None) for per-episode losses."""
    N, A = mdp.num_states, mdp.num_actions
    c = np.asarray(loss, dtype=float).reshape(N, A)
    V = np.zeros(N + 1)
    Q = np.zeros((N, A))
    for k in range(mdp.num_layers - 1, -1, -1):
        for s in mdp.states_in_layer(k):
            Q[s] = c[s] + mdp.P[s] @ V
            V[s] = Q[s].min() if policy is None else policy[s] @ Q[s]
    return Q, V


# ----------------------------------------------------------------------
# built-in instances


def bandit_mdp(num_actions: int) -> LayeredMdp:
    """L = 1: a multi-armed bandit."""
    return LayeredMdp([["s0"], ["end"]], num_actions, {("s0", a, "end"): 1.0 for a in range(num_actions)})


def diamond_mdp(p_u: Sequence[float] = (1.0, 0.0)) -> LayeredMdp:
    """Two layers, states u and v in the middle, two actions.

    ``p_u[a]`` is the probability of moving to u when playing a at the start;
    the default sends a0 to u and a1 to v deterministically.
    """
    trans = {}
    for a, pu in enumerate(p_u):
        if pu > 0:
            trans[("s0", a, "u")] = pu
        if pu < 1:
            trans[("s0", a, "v")] = 1.0 - pu
    for s in ("u", "v"):
        for a in range(2):
            trans[(s, a, "end")] = 1.0
    return LayeredMdp([["s0"], ["u", "v"], ["end"]], 2, trans)


# ----------------------------------------------------------------------
# text format


def parse_mdp(text: str) -> LayeredMdp:
    """Parse the line-based format::

        layers 2
        actions 2
        state s0 layer 0
        state u layer 1
        ...
        trans s0 0 u 1.0

    Blank lines and ``#`` comments are ignored.
    """
    L = m = None
    layers: dict[int, list[str]] = {}
    trans: dict[tuple[str, int, str], float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "layers" and len(tok) == 2:
                L = int(tok[1])
            elif tok[0] == "actions" and len(tok) == 2:
                m = int(tok[1])
            elif tok[0] == "state" and len(tok) == 4 and tok[2] == "layer":
                layers.setdefault(int(tok[3]), []).append(tok[1])
            elif tok[0] == "trans" and len(tok) == 5:
                key = (tok[1], int(tok[2]), tok[3])
                if key in trans:
                    raise MdpError(f"line {lineno}: duplicate transition")
                trans[key] = float(tok[4])
            else:
                raise MdpError(f"line {lineno}: cannot parse {raw!r}")
        except ValueError as exc:
            if isinstance(exc, MdpError):
                raise
            raise MdpError(f"line {lineno}: {exc}") from None
    if L is None or m is None:
        raise MdpError("missing 'layers' or 'actions' header")
    if sorted(layers) != list(range(L + 1)):
        raise MdpError(f"states must cover layers 0..{L}, got {sorted(layers)}")
    return LayeredMdp([layers[k] for k in range(L + 1)], m, trans)


def format_mdp(mdp: LayeredMdp) -> str:
    lines = [f"layers {mdp.num_layers}", f"actions {mdp.num_actions}"]
    for i, name in enumerate(mdp.state_names):
        lines.append(f"state {name} layer {mdp.layer_of[i]}")
    for s, a, s2 in zip(*np.nonzero(mdp.P)):
        lines.append(f"trans {mdp.state_names[s]} {a} {mdp.state_names[s2]} {float(mdp.P[s, a, s2])!r}")
    return "\n".join(lines) + "\n"


def load_mdp(path: str | Path) -> LayeredMdp:
    return parse_mdp(Path(path).read_text())
