"""Config-driven experiment runner.

Config files are INI-style with sections [mdp], [env], [algo], [run] and an
optional [diagnose]. Output for seed k goes to ``<output>/seed_<k>/``:

trace.csv
    t, expected_loss, realized_loss, comparator_loss, regret, solver_iters,
    min_q, running_regret. The three loss columns are cumulative;
    ``comparator_loss`` and ``regret`` use the end-of-run best fixed policy,
    ``running_regret`` the best fixed policy on losses up to t.
summary.json
    versioned run summary.
config.ini
    the config text exactly as read.
error.json
    written instead of the summary when the run fails.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from . import __version__
from .baselines import OrepsState, ShannonParams, oreps_step
from .environments import (
    AdversarialEnv,
    CorruptedEnv,
    Environment,
    MdpGenerator,
    StochasticEnv,
    diamond_means,
    switching_tables,
)
from .learner import LearnerState, step
from .mdp import DomainError, LayeredMdp, bandit_mdp, best_fixed_policy, diamond_mdp, load_mdp, occupancy_from_policy
from .regularizer import RegularizerParams
from .solver import SolveConfig, SolverError

SUMMARY_SCHEMA = 1
OUTPUT_ROOT_ENV = "FTRL_MDP_OUTPUT_ROOT"
TRACE_COLUMNS = (
    "t", "expected_loss", "realized_loss", "comparator_loss", "regret", "solver_iters", "min_q", "running_regret",
)


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    mdp: dict
    env: dict
    algo: dict
    T: int
    seeds: list[int]
    output: Path
    workers: int = 1
    diagnose: dict = field(default_factory=dict)
    text: str = ""
    base_dir: Path = Path(".")


def parse_seeds(text: str) -> list[int]:
    """'0-9' or '1,4,7' or a mix; seeds are non-negative."""
    seeds = []
    try:
        for part in text.replace(" ", "").split(","):
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    return seeds


def stochastic_tuned(num_states: int, num_actions: int, L: int) -> tuple[float, float]:
    """alpha, gamma minimising the stochastic-regime bound

    [(1+a)/g + g L^2 (sqrt(L) + 1/(a L))]^2 |S||A| + [(1 + a|A|) sqrt(|S| L) / g]^2.
    """
    S, A = num_states, num_actions

    def bound(x):
        a, g = np.exp(x)
        X = (1 + a) / g + g * L**2 * (math.sqrt(L) + 1 / (a * L))
        Y = (1 + a * A) * math.sqrt(S * L) / g
        return X * X * S * A + Y * Y

    x0 = np.log([1 / math.sqrt(A), 1.0])
    res = scipy.optimize.minimize(bound, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    a, g = np.exp(res.x)
    return float(a), float(g)


def expand_algo(algo: dict, mdp: LayeredMdp) -> dict:
    """Resolve presets into explicit parameters before validation."""
    algo = dict(algo)
    name = algo.setdefault("algorithm", "hybrid")
    if name not in ("hybrid", "oreps"):
        raise ConfigError(f"unknown algorithm {name!r}")
    preset = algo.get("preset", "theorem1" if name == "hybrid" else "none")
    if name == "hybrid":
        base = RegularizerParams.theorem1(mdp)
        defaults = {"alpha": base.alpha, "beta": base.beta, "gamma": base.gamma}
        if preset == "stochastic-tuned":
            a, g = stochastic_tuned(mdp.num_states + 1, mdp.num_actions, mdp.num_layers)
            defaults.update(alpha=a, gamma=g)
        elif preset not in ("theorem1", "none"):
            raise ConfigError(f"unknown preset {preset!r}")
        for key, val in defaults.items():
            algo[key] = float(algo.get(key, val))
    algo["preset"] = preset
    algo["tolerance"] = float(algo.get("tolerance", 1e-8))
    algo["max_iterations"] = int(algo.get("max_iterations", 200))
    return algo


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    return parse_config(text, base_dir=path.parent)


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in ("mdp", "env", "algo", "run"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing [{sec}] section")
    run = dict(cp["run"])
    try:
        T = int(run.get("T", run.get("episodes", "0")))
    except ValueError:
        raise ConfigError("T must be an integer") from None
    if T < 1:
        raise ConfigError("T must be at least 1")
    seeds = parse_seeds(run.get("seeds", "0"))
    out = Path(run.get("output", "out"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not out.is_absolute():
        out = Path(root) / out if root else base_dir / out
    return ExperimentConfig(
        mdp=dict(cp["mdp"]), env=dict(cp["env"]), algo=dict(cp["algo"]), T=T, seeds=seeds, output=out,
        workers=int(run.get("workers", "1")), diagnose=dict(cp["diagnose"]) if cp.has_section("diagnose") else {},
        text=text, base_dir=base_dir,
    )


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def build_mdp(section: dict, base_dir: Path = Path(".")) -> LayeredMdp:
    if "file" in section:
        p = Path(section["file"])
        return load_mdp(p if p.is_absolute() else base_dir / p)
    kind = section.get("builtin", "diamond")
    if kind == "diamond":
        return diamond_mdp(tuple(_floats(section["p_u"])) if "p_u" in section else (1.0, 0.0))
    if kind == "bandit":
        return bandit_mdp(int(section.get("actions", 2)))
    if kind == "random":
        widths = tuple(int(w) for w in _floats(section.get("widths", "2")))
        gen = MdpGenerator(widths, int(section.get("actions", 2)), float(section.get("sparsity", 1.0)), int(section.get("seed", 0)))
        return gen.generate()
    raise ConfigError(f"unknown mdp builtin {kind!r}")


def _means(section: dict, mdp: LayeredMdp) -> np.ndarray:
    m = section.get("means", "diamond")
    if m == "diamond":
        if mdp.num_pairs != 6:
            raise ConfigError("'means = diamond' needs the diamond MDP")
        return diamond_means(float(section.get("gap", 0.3)), float(section.get("base", 0.35)))
    if m == "random":
        return np.random.default_rng(int(section.get("means_seed", 0))).random(mdp.num_pairs)
    vals = np.array(_floats(m))
    if vals.shape != (mdp.num_pairs,):
        raise ConfigError(f"means has {vals.size} entries, expected {mdp.num_pairs}")
    return vals


def build_env(section: dict, mdp: LayeredMdp, seed: int) -> Environment:
    kind = section.get("kind", "stochastic")
    if kind == "zero":
        return StochasticEnv(np.zeros(mdp.num_pairs), noise="none", seed=seed)
    if kind in ("stochastic", "corrupted"):
        env = StochasticEnv(_means(section, mdp), section.get("noise", "bernoulli"), float(section.get("width", 0.0)), seed)
        if kind == "stochastic":
            return env
        return CorruptedEnv(env, mdp, float(section.get("budget", 0.0)), section.get("placement", "front"),
                            float(section.get("rate", 0.1)))
    if kind == "adversarial":
        adv = section.get("adversary", "switching")
        tables = None
        if adv == "switching":
            if "tables" in section:
                tables = np.array([_floats(row) for row in section["tables"].split(";")])
            else:
                tables = switching_tables(mdp, float(section.get("eps", 0.05)), int(section.get("table_seed", 0)))
        return AdversarialEnv(adv, mdp.num_pairs, mdp.num_actions, int(section.get("phase", 500)), tables,
                              section.get("noise", "bernoulli" if adv == "switching" else "none"), seed)
    raise ConfigError(f"unknown environment kind {kind!r}")


# ----------------------------------------------------------------------
# running


@dataclass
class RunResult:
    expected: np.ndarray  # per-episode <q_t, l_t>
    realized: np.ndarray  # per-episode loss along the trajectory
    losses: np.ndarray  # T x pairs
    solver_iters: np.ndarray
    min_q: np.ndarray
    consumed_corruption: float
    final_q: np.ndarray


def learner_rng(seed: int) -> np.random.Generator:
    """Trajectory stream; shared by all algorithms for common random numbers."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))


def run_episodes(mdp: LayeredMdp, env: Environment, algo: dict, T: int, seed: int) -> RunResult:
    cfg = SolveConfig(tolerance=algo.get("tolerance", 1e-8), max_iterations=algo.get("max_iterations", 200))
    if algo["algorithm"] == "hybrid":
        state = LearnerState.start(mdp, RegularizerParams(algo["alpha"], algo["beta"], algo["gamma"]), cfg)
        advance = step
    else:
        gamma = algo.get("eta")
        params = ShannonParams(None if gamma is None else float(gamma), str(algo.get("fixed_eta", "false")).lower() == "true")
        state = OrepsState.start(mdp, params, cfg)
        advance = oreps_step
    rng = learner_rng(seed)
    n = mdp.num_pairs
    losses = np.empty((T, n))
    expected = np.empty(T)
    realized = np.empty(T)
    iters = np.empty(T, dtype=np.int64)
    min_q = np.empty(T)
    for t in range(1, T + 1):
        loss = env.losses(t, () if state.q is None else (state.q,))
        res = advance(state, loss, rng)
        state = res.state
        losses[t - 1] = loss
        expected[t - 1] = res.q @ loss
        realized[t - 1] = sum(res.trajectory.losses)
        iters[t - 1] = res.report.iterations
        min_q[t - 1] = res.q.min()
    return RunResult(expected, realized, losses, iters, min_q, env.consumed_corruption, state.q)


def best_values_batch(mdp: LayeredMdp, cumulative: np.ndarray) -> np.ndarray:
    """Optimal deterministic-policy value for every row of a (T, pairs) cumulative-loss matrix."""
    N, A = mdp.num_states, mdp.num_actions
    V = np.zeros((cumulative.shape[0], N + 1))
    for k in range(mdp.num_layers - 1, -1, -1):
        for s in mdp.states_in_layer(k):
            Q = cumulative[:, s * A:(s + 1) * A] + V @ mdp.P[s].T
            V[:, s] = Q.min(axis=1)
    return V[:, 0]


def regret_trace(mdp: LayeredMdp, result: RunResult) -> dict[str, np.ndarray]:
    cum = np.cumsum(result.losses, axis=0)
    policy, _ = best_fixed_policy(mdp, cum[-1])
    q_star = occupancy_from_policy(mdp, policy)
    exp_cum = np.cumsum(result.expected)
    comp = cum @ q_star
    T = len(exp_cum)
    return {
        "t": np.arange(1, T + 1),
        "expected_loss": exp_cum,
        "realized_loss": np.cumsum(result.realized),
        "comparator_loss": comp,
        "regret": exp_cum - comp,
        "solver_iters": result.solver_iters,
        "min_q": result.min_q,
        "running_regret": exp_cum - best_values_batch(mdp, cum),
    }


def format_trace(trace: dict[str, np.ndarray]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    cols = [trace[c] for c in TRACE_COLUMNS]
    for row in zip(*cols):
        lines.append(",".join(str(int(v)) if i in (0, 5) else "%.17g" % v for i, v in enumerate(row)))
    return "\n".join(lines) + "\n"


def read_trace(path: str | Path) -> dict[str, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


@dataclass(frozen=True)
class FitResult:
    log_coefficient: float
    log_intercept: float
    sqrt_coefficient: float
    sqrt_intercept: float
    log_residual: float
    sqrt_residual: float
    better_fit: str
    degenerate: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def regret_fit(t: np.ndarray, regret: np.ndarray) -> FitResult:
    """Least-squares fits a log t + b and c sqrt t + d on the second half of the trace."""
    t = np.asarray(t, dtype=float)
    regret = np.asarray(regret, dtype=float)
    if len(t) < 100:
        raise DomainError("regret_fit needs a trace of at least 100 episodes")
    half = slice(len(t) // 2, None)
    tt, rr = t[half], regret[half]
    out = []
    for feat in (np.log(tt), np.sqrt(tt)):
        X = np.column_stack([feat, np.ones_like(feat)])
        coef, *_ = np.linalg.lstsq(X, rr, rcond=None)
        out.append((coef, float(np.sum((X @ coef - rr) ** 2))))
    (a, b), res_log = out[0]
    (c, d), res_sqrt = out[1]
    scale = max(float(np.abs(rr).max()), 1e-300)
    # slopes too small to move the fitted curve by a relative 1e-6 over the window
    degenerate = bool(np.ptp(rr) <= 1e-9 * max(scale, 1.0) or
                      (abs(a) * np.ptp(np.log(tt)) <= 1e-6 * scale and abs(c) * np.ptp(np.sqrt(tt)) <= 1e-6 * scale))
    return FitResult(float(a), float(b), float(c), float(d), res_log, res_sqrt,
                     "log" if res_log <= res_sqrt else "sqrt", degenerate)


def _summary(cfg: ExperimentConfig, algo: dict, seed: int, trace: dict, result: RunResult, wall: float) -> dict:
    T = len(trace["t"])
    decades = {}
    k = 1
    while 10**k <= T:
        decades[str(10**k)] = float(trace["running_regret"][10**k - 1])
        k += 1
    summary = {
        "schema_version": SUMMARY_SCHEMA,
        "package_version": __version__,
        "seed": seed,
        "T": T,
        "algorithm": algo,
        "final_regret": float(trace["regret"][-1]),
        "final_expected_loss": float(trace["expected_loss"][-1]),
        "final_comparator_loss": float(trace["comparator_loss"][-1]),
        "regret_by_decade": decades,
        "consumed_corruption": result.consumed_corruption,
        "total_solver_iterations": int(trace["solver_iters"].sum()),
        "min_q": float(trace["min_q"].min()),
        "wall_time_s": wall,
    }
    if T >= 100:
        summary["fit"] = regret_fit(trace["t"], trace["running_regret"]).as_dict()
    return summary


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Run one seed and write its artifacts; returns the summary (or error record)."""
    out = cfg.output / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.text)
    for stale in ("error.json", "summary.json"):
        (out / stale).unlink(missing_ok=True)
    start = time.perf_counter()
    try:
        mdp = build_mdp(cfg.mdp, cfg.base_dir)
        algo = expand_algo(cfg.algo, mdp)
        env = build_env(cfg.env, mdp, seed)
        result = run_episodes(mdp, env, algo, cfg.T, seed)
        trace = regret_trace(mdp, result)
    except (SolverError, DomainError, ConfigError, ValueError, ArithmeticError) as exc:
        err = {"schema_version": SUMMARY_SCHEMA, "seed": seed, "error": type(exc).__name__, "message": str(exc),
               "traceback": traceback.format_exc()}
        if isinstance(exc, SolverError):
            err["report"] = {k: v for k, v in exc.report.__dict__.items() if k != "objective_history"}
        (out / "error.json").write_text(json.dumps(err, indent=2, sort_keys=True))
        return {"seed": seed, "ok": False, "error": str(exc)}
    (out / "trace.csv").write_text(format_trace(trace))
    summary = _summary(cfg, algo, seed, trace, result, time.perf_counter() - start)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"seed": seed, "ok": True, **summary}


def _run_seed_args(args):
    return run_seed(*args)


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """All seeds; per-seed failures are recorded and do not stop the others."""
    cfg.output.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_seed_args, [(cfg, s) for s in cfg.seeds]))
    return [run_seed(cfg, s) for s in cfg.seeds]
