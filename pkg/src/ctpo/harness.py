"""Experiment orchestration: config parsing, seeded runs, metrics emission.

A run configuration is a line-oriented ``key = value`` document (``#``
starts a comment). The ``env`` key selects the environment and also the
default hyperparameter set: ``lq`` loads the scalar LQ table
(T=25, dt=0.005, J=100, beta=1, K=2000, s=10, delta=0.0002, epsilon=0.5,
alpha_policy=0.02, alpha_critic=0.01, gamma=0.1), ``pairs`` the
pair-trading table (K=200, delta=0.025, alpha_policy=0.005, gamma=0).
Every key may be overridden in the file or by CLI flags.

Outputs under the ``out`` directory:

- ``metrics.csv``: one row per (seed, iteration); header exactly
  ``seed,k,l2_to_theta_star,kl_to_optimal,eta_hat,eta_se,mean_kl_step,
  c_penalty,wall_ms``. Evaluation columns are filled every ``eval_stride``
  iterations (and on the final one); empty cells mean "not evaluated", the
  literal ``diverged`` marks an aborted seed.
- ``resolved_config.txt``: full echo of every resolved key.
- ``seed_<s>/checkpoint_<k>.txt``: flat decimal parameter lists (policy
  then critic).

RNG discipline: one master seed per run element is split into named
substreams (training iterations, evaluations, initializations) via
`ctpo.rng.substream`, so adding evaluations never perturbs training noise.

Metric notes: ``l2_to_theta_star`` is the distance of the Gaussian policy's
mean coefficients (theta1, theta2) to the closed-form optimum; the variance
coordinate is excluded because of the exp(theta3) parameterization
ambiguity, and ``kl_to_optimal`` measures the full distributional gap
(it is proportional to the performance gap for this environment).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .algorithms import (AlgoConfig, PenaltyState, TrainingDivergedError,
                         cpg_iteration, cppo_iteration, discrete_baseline_iteration)
from .critic import MLPCritic, QuadraticCritic
from .lq import kl_to_optimal, solve_lq
from .occupation import (discounted_return_batch, occupation_state_samples,
                         coupled_second_moment, discounted_functional, gronwall_check,
                         histogram_functional, occupation_histogram, simulate_grid_states)
from .policies import BetaMLPPolicy, GaussianLinearPolicy, aggregated_drift_batch
from .rng import substream
from .sde import (BoundedEnvParams, ConfigError, EnvModel, LQParams, PairTradingParams,
                  RolloutDivergedError, make_bounded_env, make_lq_env, make_ou_env,
                  make_pair_trading_env, n_grid_steps)

__all__ = ["RunConfig", "MetricsRow", "ParseError", "parse_config", "mc_performance",
           "run", "write_metrics_csv", "read_metrics_csv", "write_checkpoint",
           "read_checkpoint", "METRICS_FIELDS"]

ENVS = ("lq", "pairs", "synthetic-bounded")
ALGOS = ("cpg", "cppo", "cppo-nst", "dpg", "dppo", "verify")

METRICS_FIELDS = ("seed", "k", "l2_to_theta_star", "kl_to_optimal", "eta_hat",
                  "eta_se", "mean_kl_step", "c_penalty", "wall_ms")


class ParseError(ConfigError):
    """Configuration text could not be parsed; carries the offending line."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class MetricsRow:
    """One metrics record; float cells may hold None (not evaluated) or 'diverged'."""

    seed: int
    k: int
    l2_to_theta_star: object = None
    kl_to_optimal: object = None
    eta_hat: object = None
    eta_se: object = None
    mean_kl_step: object = None
    c_penalty: object = None
    wall_ms: object = None


@dataclass
class RunConfig:
    """Fully resolved configuration of one experiment."""

    env: str = "lq"
    algo: str = "cpg"
    seeds: tuple = (0,)
    out: str = "runs"
    algo_config: AlgoConfig = field(default_factory=AlgoConfig)
    lq_params: LQParams = field(default_factory=LQParams)
    pairs_params: PairTradingParams = field(default_factory=PairTradingParams)
    bounded_params: BoundedEnvParams = field(default_factory=BoundedEnvParams)
    theta0: tuple = (0.0, 0.0, 0.0)
    hidden: int = 32
    eval_stride: int = 10
    mc_eval_samples: int = 100
    checkpoint_stride: int = 0  # 0: final checkpoint only
    kl_eval_states: int = 256
    verify_traj: int = 2000
    record_wall_time: bool = False  # off keeps metrics.csv byte-deterministic

    def make_env(self) -> EnvModel:
        if self.env == "lq":
            return make_lq_env(self.lq_params)
        if self.env == "pairs":
            return make_pair_trading_env(self.pairs_params)
        if self.env == "synthetic-bounded":
            return make_bounded_env(self.bounded_params)
        raise ConfigError(f"unknown env {self.env!r}")


_FLOAT_KEYS = {
    "T": ("algo", "T"), "dt": ("algo", "dt"), "beta": ("algo", "beta"),
    "gamma": ("algo", "gamma"), "delta": ("algo", "delta_radius"),
    "epsilon": ("algo", "epsilon_tol"), "c_penalty_init": ("algo", "c_penalty_init"),
    "alpha_policy": ("algo", "alpha_policy"), "alpha_critic": ("algo", "alpha_critic"),
    "A": ("lq", "A"), "B": ("lq", "B"), "C": ("lq", "C"), "D": ("lq", "D"),
    "M": ("lq", "M_cost"), "N": ("lq", "N_cost"), "R": ("lq", "R"),
    "P": ("lq", "P"), "Q": ("lq", "Q"),
    "k": ("pairs", "k"), "theta_mean": ("pairs", "theta_mean"), "eta": ("pairs", "eta"),
    "rho": ("pairs", "rho"), "sigma": ("pairs", "sigma"), "r_f": ("pairs", "r_f"),
    "ell": ("pairs", "ell"), "s0": ("pairs", "s0"), "w0": ("pairs", "w0"),
    "pull": ("bounded", "pull"), "noise": ("bounded", "noise"),
}
_INT_KEYS = {
    "J": ("algo", "J"), "K": ("algo", "K_iters"), "s": ("algo", "s_steps"),
    "lr_decay_start": ("algo", "lr_decay_start"),
    "hidden": ("run", "hidden"), "eval_stride": ("run", "eval_stride"),
    "mc_eval_samples": ("run", "mc_eval_samples"),
    "checkpoint_stride": ("run", "checkpoint_stride"),
    "kl_eval_states": ("run", "kl_eval_states"), "verify_traj": ("run", "verify_traj"),
}
_STR_KEYS = {"env", "algo", "out", "lr_decay", "lr_decay_critic", "wall_time"}
_LIST_KEYS = {"seeds", "x0", "theta0"}

_ENV_ALGO_DEFAULTS = {
    "lq": {},
    "pairs": {"K_iters": 200, "delta_radius": 0.025, "alpha_policy": 0.005, "gamma": 0.0},
    "synthetic-bounded": {"gamma": 0.0},
}


def _parse_scalar(value: str, caster, key: str, lineno: int):
    try:
        return caster(value)
    except ValueError as exc:
        raise ParseError(f"cannot parse value {value!r} for key {key!r}: {exc}", lineno)


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse a key = value document into a fully resolved `RunConfig`.

    ``overrides`` (e.g. from CLI flags) are applied after the file contents,
    as ``{key: string_value}``. Unknown keys, unparsable values and invariant
    violations raise `ParseError` / `ConfigError`.
    """
    entries: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        entries.append((lineno, key, value))
    if overrides:
        entries.extend((0, k, str(v)) for k, v in overrides.items() if v is not None)

    known = set(_FLOAT_KEYS) | set(_INT_KEYS) | _STR_KEYS | _LIST_KEYS
    for lineno, key, _ in entries:
        if key not in known:
            raise ParseError(f"unknown key {key!r}", lineno)

    env = "lq"
    for lineno, key, value in entries:
        if key == "env":
            if value not in ENVS:
                raise ParseError(f"unknown env {value!r} (choose from {ENVS})", lineno)
            env = value

    algo_kwargs = dict(_ENV_ALGO_DEFAULTS[env])
    lq_kwargs: dict = {}
    pairs_kwargs: dict = {}
    bounded_kwargs: dict = {}
    run_kwargs: dict = {}
    algo_name = "cpg"
    seeds: tuple = (0,)
    out = "runs"
    lr_decay = "inverse"
    lr_decay_critic = "constant"
    theta0 = (0.0, 0.0, 0.0)
    x0: Optional[tuple] = None

    for lineno, key, value in entries:
        if key == "env":
            continue
        if key == "algo":
            if value not in ALGOS:
                raise ParseError(f"unknown algo {value!r} (choose from {ALGOS})", lineno)
            algo_name = value
        elif key == "out":
            out = value
        elif key == "lr_decay":
            lr_decay = value
        elif key == "lr_decay_critic":
            lr_decay_critic = value
        elif key == "wall_time":
            if value not in ("on", "off"):
                raise ParseError(f"wall_time must be on or off, got {value!r}", lineno)
            run_kwargs["record_wall_time"] = value == "on"
        elif key == "seeds":
            seeds = tuple(_parse_scalar(v.strip(), int, key, lineno)
                          for v in value.split(","))
            if not seeds:
                raise ParseError("seed list must be nonempty", lineno)
        elif key == "theta0":
            theta0 = tuple(_parse_scalar(v.strip(), float, key, lineno)
                           for v in value.split(","))
            if len(theta0) != 3:
                raise ParseError("theta0 needs exactly three components", lineno)
        elif key == "x0":
            x0 = tuple(_parse_scalar(v.strip(), float, key, lineno)
                       for v in value.split(","))
        elif key in _FLOAT_KEYS:
            target, name = _FLOAT_KEYS[key]
            val = _parse_scalar(value, float, key, lineno)
            {"algo": algo_kwargs, "lq": lq_kwargs, "pairs": pairs_kwargs,
             "bounded": bounded_kwargs}[target][name] = val
        elif key in _INT_KEYS:
            target, name = _INT_KEYS[key]
            val = _parse_scalar(value, int, key, lineno)
            (algo_kwargs if target == "algo" else run_kwargs)[name] = val

    algo_kwargs["lr_decay"] = lr_decay
    algo_kwargs["lr_decay_critic"] = lr_decay_critic
    # the LQ environment shares the discount and temperature with the run
    lq_kwargs.setdefault("beta", algo_kwargs.get("beta", 1.0))
    lq_kwargs.setdefault("gamma", algo_kwargs.get("gamma",
                                                  0.1 if env == "lq" else 0.0))
    lq_params = LQParams(**lq_kwargs)
    pairs_params = PairTradingParams(**pairs_kwargs)
    bounded_params = BoundedEnvParams(**bounded_kwargs)

    if x0 is None:
        x0_value: object = pairs_params.x0 if env == "pairs" else 0.0
    elif env == "pairs":
        if len(x0) != 2:
            raise ParseError("x0 for the pairs env needs two components", 0)
        x0_value = np.array(x0, dtype=float)
    else:
        if len(x0) != 1:
            raise ParseError("x0 for a 1-D env needs one component", 0)
        x0_value = x0[0]
    algo_kwargs["x0"] = x0_value

    algo_config = AlgoConfig(**algo_kwargs)
    return RunConfig(env=env, algo=algo_name, seeds=seeds, out=out,
                     algo_config=algo_config, lq_params=lq_params,
                     pairs_params=pairs_params, bounded_params=bounded_params,
                     theta0=theta0, **run_kwargs)


def resolved_config_text(cfg: RunConfig) -> str:
    """Echo of every resolved key, one per line, stable ordering."""
    ac = cfg.algo_config
    lines = [
        f"env = {cfg.env}", f"algo = {cfg.algo}",
        "seeds = " + ",".join(str(s) for s in cfg.seeds), f"out = {cfg.out}",
        f"T = {ac.T!r}", f"dt = {ac.dt!r}", f"beta = {ac.beta!r}", f"gamma = {ac.gamma!r}",
        f"J = {ac.J}", f"K = {ac.K_iters}", f"s = {ac.s_steps}",
        f"delta = {ac.delta_radius!r}", f"epsilon = {ac.epsilon_tol!r}",
        f"c_penalty_init = {ac.c_penalty_init!r}",
        f"alpha_policy = {ac.alpha_policy!r}", f"alpha_critic = {ac.alpha_critic!r}",
        f"lr_decay = {ac.lr_decay}", f"lr_decay_critic = {ac.lr_decay_critic}",
        f"lr_decay_start = {ac.lr_decay_start}",
        "x0 = " + (",".join(repr(float(v)) for v in np.atleast_1d(ac.x0))),
        "theta0 = " + ",".join(repr(float(v)) for v in cfg.theta0),
        f"hidden = {cfg.hidden}", f"eval_stride = {cfg.eval_stride}",
        f"mc_eval_samples = {cfg.mc_eval_samples}",
        f"checkpoint_stride = {cfg.checkpoint_stride}",
        f"kl_eval_states = {cfg.kl_eval_states}", f"verify_traj = {cfg.verify_traj}",
        f"wall_time = {'on' if cfg.record_wall_time else 'off'}",
    ]
    if cfg.env == "lq":
        p = cfg.lq_params
        lines += [f"A = {p.A!r}", f"B = {p.B!r}", f"C = {p.C!r}", f"D = {p.D!r}",
                  f"M = {p.M_cost!r}", f"N = {p.N_cost!r}", f"R = {p.R!r}",
                  f"P = {p.P!r}", f"Q = {p.Q!r}"]
    elif cfg.env == "pairs":
        p = cfg.pairs_params
        lines += [f"k = {p.k!r}", f"theta_mean = {p.theta_mean!r}", f"eta = {p.eta!r}",
                  f"rho = {p.rho!r}", f"sigma = {p.sigma!r}", f"r_f = {p.r_f!r}",
                  f"ell = {p.ell!r}", f"w0 = {p.w0!r}"]
    else:
        p = cfg.bounded_params
        lines += [f"pull = {p.pull!r}", f"noise = {p.noise!r}"]
    return "\n".join(lines) + "\n"


def mc_performance(env: EnvModel, policy, beta: float, T: float, dt: float, n: int,
                   rng: np.random.Generator, gamma: float = 0.0, x0=0.0):
    """Monte Carlo estimate of the performance metric from n rollouts.

    Mean and standard error of the per-trajectory discounted return
    sum_i e^{-beta t_i} (r_i + gamma p_i) dt from the fixed initial state.
    Returns (nan, nan) if every rollout diverged.
    """
    if n < 2:
        raise ConfigError(f"mc_performance needs n >= 2, got {n}")
    rets = discounted_return_batch(env, policy, x0, T, dt, n, rng, beta, gamma)
    good = rets[np.isfinite(rets)]
    if good.size < 2:
        return math.nan, math.nan
    return float(good.mean()), float(good.std(ddof=1) / math.sqrt(good.size))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path: str, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(_cell(getattr(row, name)) for name in METRICS_FIELDS) + "\n")


def _parse_cell(text: str):
    if text == "":
        return None
    if text == "diverged":
        return text
    return float(text)


def read_metrics_csv(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != METRICS_FIELDS:
            raise ParseError(f"unexpected metrics header {header}")
        rows = []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            row = MetricsRow(seed=int(cells[0]), k=int(cells[1]))
            for name, cell in zip(METRICS_FIELDS[2:], cells[2:]):
                setattr(row, name, _parse_cell(cell))
            rows.append(row)
    return rows


def write_checkpoint(path: str, policy_vec: np.ndarray, critic_vec: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# policy {policy_vec.size}\n")
        for v in policy_vec:
            fh.write(repr(float(v)) + "\n")
        fh.write(f"# critic {critic_vec.size}\n")
        for v in critic_vec:
            fh.write(repr(float(v)) + "\n")


def read_checkpoint(path: str):
    sections: dict[str, list[float]] = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                current = line.split()[1]
                sections[current] = []
            else:
                sections[current].append(float(line))
    return np.array(sections.get("policy", [])), np.array(sections.get("critic", []))


def _init_policy_critic(cfg: RunConfig, env: EnvModel, seed: int):
    if cfg.env == "pairs":
        sizes_p = (env.state_dim, cfg.hidden, cfg.hidden, 2)
        sizes_c = (env.state_dim, cfg.hidden, cfg.hidden, 1)
        policy = BetaMLPPolicy(sizes_p, ell=cfg.pairs_params.ell,
                               rng=substream(seed, "init-policy"),
                               features=env.feature_map)
        critic = MLPCritic(sizes_c, rng=substream(seed, "init-critic"),
                           features=env.feature_map)
    else:
        policy = GaussianLinearPolicy(*cfg.theta0)
        critic = QuadraticCritic(0.0, 0.0, 0.0)
    return policy, critic


def _train_one_seed(cfg: RunConfig, env: EnvModel, seed: int, out_dir: str):
    ac = replace(cfg.algo_config, seed=seed)
    policy, critic = _init_policy_critic(cfg, env, seed)
    penalty = PenaltyState(ac.c_penalty_init)
    rows: list[MetricsRow] = []
    sol = solve_lq(cfg.lq_params) if cfg.env == "lq" else None
    seed_dir = os.path.join(out_dir, f"seed_{seed}")
    os.makedirs(seed_dir, exist_ok=True)
    diverged = False
    for k in range(ac.K_iters):
        rng = substream(seed, "train", k)
        try:
            if cfg.algo == "cpg":
                policy, critic, rec = cpg_iteration(env, policy, critic, ac, k, rng)
            elif cfg.algo in ("cppo", "cppo-nst"):
                variant = "sqrt" if cfg.algo == "cppo" else "linear"
                policy, critic, penalty, rec = cppo_iteration(
                    env, policy, critic, penalty, ac, k, rng, variant=variant)
            elif cfg.algo == "dpg":
                policy, critic, rec = discrete_baseline_iteration(
                    env, policy, critic, ac, k, rng, algo="dpg")
            elif cfg.algo == "dppo":
                policy, critic, penalty, rec = discrete_baseline_iteration(
                    env, policy, critic, ac, k, rng, algo="dppo", penalty=penalty)
            else:
                raise ConfigError(f"unknown training algo {cfg.algo!r}")
        except (RolloutDivergedError, TrainingDivergedError):
            rows.append(MetricsRow(seed=seed, k=k, l2_to_theta_star="diverged",
                                   kl_to_optimal="diverged", eta_hat="diverged",
                                   eta_se="diverged", mean_kl_step="diverged",
                                   c_penalty="diverged", wall_ms="diverged"))
            diverged = True
            break
        row = MetricsRow(seed=seed, k=k, mean_kl_step=rec.mean_kl_step,
                         c_penalty=rec.c_penalty,
                         wall_ms=rec.wall_ms if cfg.record_wall_time else None)
        final = k == ac.K_iters - 1
        if final or (cfg.eval_stride > 0 and k % cfg.eval_stride == 0):
            eval_rng = substream(seed, "eval", k)
            eta, se = mc_performance(env, policy, ac.beta, ac.T, ac.dt,
                                     cfg.mc_eval_samples, eval_rng, ac.gamma, ac.x0)
            row.eta_hat, row.eta_se = eta, se
            if sol is not None:
                theta = policy.to_vector()
                row.l2_to_theta_star = float(np.hypot(theta[0] - sol.mean_slope,
                                                      theta[1] - sol.mean_intercept))
                states, _, _ = occupation_state_samples(
                    env, policy, ac.x0, ac.beta, ac.T, ac.dt, cfg.kl_eval_states,
                    substream(seed, "eval-kl", k))
                row.kl_to_optimal = kl_to_optimal(policy, sol, states)
        rows.append(row)
        if final or (cfg.checkpoint_stride > 0 and k % cfg.checkpoint_stride == 0):
            write_checkpoint(os.path.join(seed_dir, f"checkpoint_{k}.txt"),
                             policy.to_vector(), critic.to_vector())
    return rows, diverged


def _verify_rows(cfg: RunConfig):
    """Identity-check suite; returns (name, lhs, rhs, se, passed) tuples."""
    n_traj = cfg.verify_traj
    beta, T, dt = 1.0, 25.0, 0.005
    env = make_ou_env()
    checks = []

    # occupation mass vs the discrete geometric sum
    N = n_grid_steps(T, dt)
    geom = float(np.exp(-beta * dt * np.arange(N)).sum() * dt)
    edges = np.linspace(-6.0, 6.0, 121)
    rng = substream(cfg.seeds[0], "verify-mass")
    hist = occupation_histogram(
        [(s, dt) for s in simulate_grid_states(env, None, 0.0, T, dt, 64, rng)],
        beta, edges)
    checks.append(("occupation_mass", hist.total_mass, geom,
                   0.0, abs(hist.total_mass - geom) < 1e-6))

    # occupation-time identity for five test functions on the OU process
    test_fns = [("one", lambda x: np.ones_like(x)), ("x", lambda x: x),
                ("x^2", lambda x: x * x), ("indicator_pos", lambda x: (x > 0).astype(float)),
                ("gauss_bump", lambda x: np.exp(-x * x))]
    for name, phi in test_fns:
        rng = substream(cfg.seeds[0], "verify-identity", name)
        direct, se_d = discounted_functional(env, None, phi, beta, T, dt, n_traj, rng, 0.0)
        rng2 = substream(cfg.seeds[0], "verify-identity-hist", name)
        inner, se_h = histogram_functional(env, None, 0.0, phi, beta, T, dt, n_traj,
                                           rng2, edges)
        se = math.sqrt(se_d**2 + se_h**2)
        # binning bias allowance: half-width^2 curvature term on top of 3 SE
        tol = 3.0 * se + 2e-3
        checks.append((f"occupation_identity[{name}]", direct, inner, se,
                       abs(direct - inner) < tol))

    # coupling exactness and the moment bound on the bounded environment
    bounded = make_bounded_env(cfg.bounded_params)
    pi = GaussianLinearPolicy(0.0, 0.0, math.log(0.25))
    pi_hat = GaussianLinearPolicy(0.0, 0.5, math.log(0.25))
    rng = substream(cfg.seeds[0], "verify-coupling")
    times, msq, se = coupled_second_moment(bounded, pi, pi, 0.0, 2.0, 0.01, 64, rng)
    checks.append(("coupling_exactness", float(msq.max()), 0.0, 0.0, msq.max() == 0.0))

    rng = substream(cfg.seeds[0], "verify-gronwall")
    times, msq, se = coupled_second_moment(bounded, pi, pi_hat, 0.0, 2.0, 0.01, 64, rng)
    gdiff = float(aggregated_drift_batch(bounded, pi_hat, np.zeros(1))[0]
                  - aggregated_drift_batch(bounded, pi, np.zeros(1))[0])
    c_pi = gdiff**2
    report = gronwall_check(times, msq, se, C_b=cfg.bounded_params.pull / 2.0,
                            C_sigma=0.0, C_pi=c_pi)
    checks.append(("gronwall_bound", float(msq.max()),
                   float(report.envelope.max()), 0.0, bool(report.passed)))
    neg = gronwall_check(times, msq, se, C_b=cfg.bounded_params.pull / 2.0,
                         C_sigma=0.0, C_pi=c_pi / 2.0)
    checks.append(("gronwall_negative_control", float(neg.n_violations), 1.0, 0.0,
                   not neg.passed))
    return checks


def run(cfg: RunConfig) -> int:
    """Execute a run configuration; returns the process exit code.

    0 on success, 3 if every seed diverged (training algos). Configuration
    errors raise before any work starts (the CLI maps them to exit code 2).
    """
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(resolved_config_text(cfg))

    if cfg.algo == "verify":
        checks = _verify_rows(cfg)
        with open(os.path.join(out_dir, "verify.csv"), "w", encoding="utf-8") as fh:
            fh.write("check,lhs,rhs,se,pass\n")
            for name, lhs, rhs, se, ok in checks:
                fh.write(f"{name},{float(lhs)!r},{float(rhs)!r},{float(se)!r},"
                         f"{'pass' if ok else 'fail'}\n")
        return 0 if all(c[-1] for c in checks) else 3

    env = cfg.make_env()
    all_rows: list[MetricsRow] = []
    n_diverged = 0
    for seed in cfg.seeds:
        rows, diverged = _train_one_seed(cfg, env, seed, out_dir)
        all_rows.extend(rows)
        n_diverged += int(diverged)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), all_rows)
    return 3 if n_diverged == len(cfg.seeds) else 0
