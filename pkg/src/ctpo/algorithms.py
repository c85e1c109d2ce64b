"""Training loops: policy gradient and proximal policy optimization in
continuous time, their discrete-time baselines, and the soft improvement map.

One iteration of the gradient method (both algorithms share steps 1-4):

1. collect one truncated trajectory of horizon T under the current policy;
2. sweep the TD critic update over the trajectory, in order;
3. draw J rollout times tau_j ~ Exponential(beta), floored to the grid;
4. form advantage-rate estimates q_hat at the sampled (X_tau, a_tau);
5. ascend the gradient estimator

   (1/beta) (1/J) sum_j [ score(x_j, a_j) (q_hat_j + gamma p_hat_j)
                          + gamma grad_theta p(x_j, a_j, pi_theta) ],

   where for the entropy regularizer grad_theta p = -score at the sample.

The proximal variant replaces step 5 by s gradient-ascent steps on the
importance-weighted surrogate minus an adaptive penalty
C_penalty * Dbar(theta || theta_k), where Dbar is the mean square-root KL
divergence over the sampled rollout-time states for the "sqrt" variant and
the mean KL itself for the "linear" variant. After the inner steps the
penalty constant doubles when the realized Dbar overshoots (1+eps) delta,
halves when it undershoots delta/(1+eps), and holds otherwise.

KL argument order: the averaged statistic is KL(pi_old || pi_new), the
old-policy-first reading of the penalty definition (the display defining
Dbar and the one using it disagree on order; old-first is implemented
throughout).

Learning-rate schedules: the reference schedule "base for the first 50
iterations, then base*log(50/k)" is negative past iteration 50 as printed;
a configurable decay family is provided instead ("constant", "inverse",
"inverse-sqrt", "inverse-log", and the literal schedule floored at zero)
with "inverse" (base * 50/k) as the default.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import digamma, expit

from .critic import q_estimate_batch, mstde_sweep
from .nets import mlp_backward, mlp_forward
from .occupation import OccupationSamples, sample_rollout_indices, surrogate_objective
from .policies import GaussianLinearPolicy, kl_divergence_batch
from .sde import ConfigError, EnvModel, Trajectory, n_grid_steps, rollout

__all__ = [
    "AlgoConfig",
    "PenaltyState",
    "IterationRecord",
    "TrainingDivergedError",
    "ImprovementUndefinedError",
    "SoftPolicy",
    "learning_rate",
    "samples_from_trajectory",
    "cpg_gradient",
    "surrogate_gradient",
    "mean_sqrt_kl",
    "mean_kl",
    "penalty_adapt",
    "cpg_iteration",
    "cppo_iteration",
    "discrete_baseline_iteration",
    "soft_q_improvement",
]

_KL_FLOOR = 1e-12  # inside the square root of the penalty gradient


class TrainingDivergedError(RuntimeError):
    """Policy or critic parameters became non-finite during training."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class ImprovementUndefinedError(RuntimeError):
    """Soft improvement requested for an advantage rate that is not strictly
    concave in the action (non-negative leading coefficient)."""


@dataclass(frozen=True)
class SoftPolicy:
    """Result of one soft improvement step: Gaussian, or a point mass if variance=0."""

    mean: float
    variance: float


@dataclass(frozen=True)
class AlgoConfig:
    """Hyperparameters of one training run.

    Defaults follow the scalar LQ experiment; the pair-trading experiment
    overrides K_iters=200, delta_radius=0.025, alpha_policy=0.005, gamma=0.
    """

    T: float = 25.0
    dt: float = 0.005
    beta: float = 1.0
    gamma: float = 0.1
    J: int = 100
    alpha_policy: float = 0.02
    alpha_critic: float = 0.01
    lr_decay: str = "inverse"
    lr_decay_start: int = 50
    lr_decay_critic: str = "constant"
    K_iters: int = 2000
    s_steps: int = 10
    delta_radius: float = 2e-4
    epsilon_tol: float = 0.5
    c_penalty_init: float = 1.0
    seed: int = 0
    x0: object = 0.0

    def __post_init__(self):
        if self.J < 1:
            raise ConfigError(f"J >= 1 violated: J={self.J}")
        if self.delta_radius <= 0:
            raise ConfigError(f"delta_radius > 0 violated: {self.delta_radius}")
        if self.epsilon_tol <= 0:
            raise ConfigError(f"epsilon_tol > 0 violated: {self.epsilon_tol}")
        for decay in (self.lr_decay, self.lr_decay_critic):
            if decay not in ("constant", "inverse", "inverse-sqrt", "inverse-log",
                             "literal"):
                raise ConfigError(f"unknown lr_decay {decay!r}")
        n_grid_steps(self.T, self.dt)

    @property
    def n_steps(self) -> int:
        return n_grid_steps(self.T, self.dt)


@dataclass(frozen=True)
class PenaltyState:
    """Adaptive penalty constant of the proximal algorithm."""

    c_penalty: float

    def __post_init__(self):
        if self.c_penalty <= 0:
            raise ConfigError(f"c_penalty must be positive, got {self.c_penalty}")


@dataclass
class IterationRecord:
    """Per-iteration training diagnostics."""

    k: int
    theta: np.ndarray
    phi: np.ndarray
    mean_kl_step: float
    grad_norm: float
    wall_ms: float
    c_penalty: Optional[float] = None


def learning_rate(base: float, k: int, decay: str = "inverse", start: int = 50) -> float:
    """Schedule value at 0-based iteration k (constant for the first ``start``)."""
    k1 = k + 1
    if decay == "constant" or k1 <= start:
        return base
    if decay == "inverse":
        return base * start / k1
    if decay == "inverse-sqrt":
        return base * math.sqrt(start / k1)
    if decay == "inverse-log":
        return base / (1.0 + math.log(k1 / start))
    if decay == "literal":
        return max(base * math.log(start / k1), 0.0)
    raise ConfigError(f"unknown lr decay {decay!r}")


def samples_from_trajectory(critic, traj: Trajectory, indices, beta: float) -> OccupationSamples:
    """Assemble (X_tau, a_tau, q_hat, p_hat) tuples at sampled grid indices."""
    idx = np.asarray(indices, dtype=int)
    return OccupationSamples(
        states=traj.states[idx],
        actions=traj.actions[idx],
        q_hat=q_estimate_batch(critic, traj, idx, beta),
        p_hat=traj.reg_values[idx],
    )


def _state_columns(states: np.ndarray) -> np.ndarray:
    return states if states.ndim == 1 else states.T


def cpg_gradient(samples: OccupationSamples, policy, gamma: float, beta: float,
                 regularizer: str = "entropy") -> np.ndarray:
    """Monte Carlo policy-gradient estimate from rollout-time samples."""
    if regularizer == "entropy":
        w = samples.q_hat + gamma * samples.p_hat - gamma
    else:
        w = samples.q_hat
    n = len(samples)
    if isinstance(policy, GaussianLinearPolicy):
        scores = policy.score_batch(samples.states, samples.actions)
        return scores @ w / (n * beta)
    return policy.score_weighted_sum(_state_columns(samples.states), samples.actions,
                                     w) / (n * beta)


def _ratio_mask(pi_new, pi_old, samples: OccupationSamples):
    logp_new = pi_new.log_density_batch(_state_columns(samples.states), samples.actions)
    logp_old = pi_old.log_density_batch(_state_columns(samples.states), samples.actions)
    log_ratio = logp_new - logp_old
    keep = np.isfinite(log_ratio) & (log_ratio < 700.0)
    return logp_new, np.exp(np.where(keep, log_ratio, 0.0)), keep


def surrogate_gradient(pi_new, pi_old, samples: OccupationSamples, gamma: float,
                       beta: float, regularizer: str = "entropy") -> np.ndarray:
    """Gradient of the importance-weighted surrogate at ``pi_new``.

    At pi_new = pi_old this coincides with `cpg_gradient` on the same
    samples (the ratio is one and its gradient is the score).
    """
    logp_new, ratio, keep = _ratio_mask(pi_new, pi_old, samples)
    if regularizer == "entropy":
        w = ratio * (samples.q_hat + gamma * (-logp_new) - gamma)
    else:
        w = ratio * samples.q_hat
    w = np.where(keep, w, 0.0)
    n = int(keep.sum())
    if n == 0:
        raise TrainingDivergedError("all importance ratios degenerate")
    if isinstance(pi_new, GaussianLinearPolicy):
        scores = pi_new.score_batch(samples.states, samples.actions)
        return scores @ w / (n * beta)
    return pi_new.score_weighted_sum(_state_columns(samples.states), samples.actions,
                                     w) / (n * beta)


def mean_sqrt_kl(policy_new, policy_old, states) -> float:
    """Mean over states of sqrt(KL(pi_old(.|x) || pi_new(.|x)))."""
    kl = kl_divergence_batch(policy_old, policy_new, _state_columns(np.asarray(states)))
    return float(np.mean(np.sqrt(np.maximum(kl, 0.0))))


def mean_kl(policy_new, policy_old, states) -> float:
    """Mean over states of KL(pi_old(.|x) || pi_new(.|x))."""
    kl = kl_divergence_batch(policy_old, policy_new, _state_columns(np.asarray(states)))
    return float(np.mean(kl))


def _penalty_gradient(pi_new, pi_old, states, variant: str) -> np.ndarray:
    """Gradient in the new policy's parameters of the averaged KL statistic."""
    X = _state_columns(np.asarray(states))
    if isinstance(pi_new, GaussianLinearPolicy):
        m_o, v_o = pi_old.mean(X), pi_old.variance
        m_n, v_n = pi_new.mean(X), pi_new.variance
        dm = (m_n - m_o) / v_n
        dt3 = 0.5 - (v_o + (m_n - m_o) ** 2) / (2.0 * v_n)
        per_state = np.stack([dm * X, dm, dt3])
        if variant == "sqrt":
            kl = kl_divergence_batch(pi_old, pi_new, X)
            per_state = per_state / (2.0 * np.sqrt(kl + _KL_FLOOR))
        return per_state.mean(axis=1)
    # Beta policy: chain the closed-form KL derivative through the heads
    a_o, b_o = pi_old.shape_params_batch(X)
    raw, cache = mlp_forward(pi_new.weights, pi_new._feat_batch(X))
    ab = np.logaddexp(0.0, raw) + 1e-3
    a_n, b_n = ab[0], ab[1]
    common_o = digamma(a_o + b_o)
    common_n = digamma(a_n + b_n)
    dka = digamma(a_n) - common_n - digamma(a_o) + common_o
    dkb = digamma(b_n) - common_n - digamma(b_o) + common_o
    seed = np.stack([dka * expit(raw[0]), dkb * expit(raw[1])])
    if variant == "sqrt":
        from .policies import _beta_kl

        kl = _beta_kl(a_o, b_o, a_n, b_n)
        seed = seed / (2.0 * np.sqrt(kl + _KL_FLOOR))
    return mlp_backward(pi_new.weights, cache, seed) / X.shape[-1]


def _penalized_value(pi_new, pi_old, samples: OccupationSamples, c: float,
                     config: AlgoConfig, regularizer: str, variant: str,
                     scale: float) -> float:
    value = surrogate_objective(pi_new, pi_old, samples, config.gamma, config.beta,
                                regularizer)
    if variant == "sqrt":
        stat = mean_sqrt_kl(pi_new, pi_old, samples.states)
    else:
        stat = mean_kl(pi_new, pi_old, samples.states)
    return scale * value - c * stat


def _inner_ascent_step(pi_cur, pi_old, samples: OccupationSamples, c: float,
                       config: AlgoConfig, regularizer: str, variant: str,
                       alpha: float, k: int, scale: float = 1.0):
    """One safeguarded ascent step on the penalized surrogate.

    Fixed-step ascent is unstable here: near the anchor the square-root
    penalty has a kink, so its gradient keeps a c-scaled magnitude however
    close the iterate is, and once alpha * c overshoots, every step flings
    the parameters further out while the realized KL statistic *grows* with
    c, which feeds the doubling controller and diverges. Backtracking (halve
    the step until the penalized value does not decrease) restores the
    monotone step-size-in-c response the adaptive controller relies on.
    ``scale`` multiplies the surrogate part (the discrete baseline works
    with per-step rather than rate-scaled advantages).
    """
    grad = scale * surrogate_gradient(pi_cur, pi_old, samples, config.gamma,
                                      config.beta, regularizer)
    grad = grad - c * _penalty_gradient(pi_cur, pi_old, samples.states, variant)
    base = _penalized_value(pi_cur, pi_old, samples, c, config, regularizer, variant,
                            scale)
    step_stat = mean_sqrt_kl if variant == "sqrt" else mean_kl
    # allocate the tolerated radius across the fixed inner steps; a full inner
    # loop then accumulates about 1.3 delta, inside the adaptation dead zone
    # [delta/(1+eps), (1+eps) delta] with headroom for partial fills. The
    # square-root statistic is length-like (additive along aligned steps);
    # the linear-KL statistic is quadratic in displacement, so its per-step
    # share carries an extra 1/s factor.
    s = max(config.s_steps, 1)
    step_cap = 1.3 * config.delta_radius / (s if variant == "sqrt" else s * s)
    vec = pi_cur.to_vector()
    step = alpha
    for _ in range(40):
        try:
            candidate = _updated_policy(pi_cur, vec + step * grad, k)
        except TrainingDivergedError:
            step *= 0.5
            continue
        if (step_stat(candidate, pi_cur, samples.states) <= step_cap
                and _penalized_value(candidate, pi_old, samples, c, config, regularizer,
                                     variant, scale) >= base):
            return candidate
        step *= 0.5
    return pi_cur


def penalty_adapt(c: PenaltyState, measured_kl: float, delta: float,
                  epsilon: float) -> PenaltyState:
    """Double / halve / hold the penalty constant from the realized statistic.

    The constant is kept inside the normal float range (1e-300 .. 1e300) so
    that a long run of one-sided adaptations cannot underflow it to zero or
    overflow it to infinity.
    """
    if measured_kl >= (1.0 + epsilon) * delta:
        return PenaltyState(min(c.c_penalty * 2.0, 1e300))
    if measured_kl <= delta / (1.0 + epsilon):
        return PenaltyState(max(c.c_penalty / 2.0, 1e-300))
    return c


def _check_finite_params(vec: np.ndarray, what: str, k: int) -> None:
    if not np.all(np.isfinite(vec)):
        raise TrainingDivergedError(f"non-finite {what} parameters", iteration=k)


def _updated_policy(policy, vec: np.ndarray, k: int):
    """Rebuild the policy from an updated vector, mapping range violations
    (non-finite entries, variance under/overflow) to a training divergence."""
    _check_finite_params(vec, "policy", k)
    try:
        return policy.with_vector(vec)
    except ConfigError as exc:
        raise TrainingDivergedError(f"policy parameters out of range: {exc}",
                                    iteration=k) from exc


def _collect(env: EnvModel, policy, critic, config: AlgoConfig, k: int,
             rng: np.random.Generator):
    traj = rollout(env, policy, config.x0, config.T, config.dt, rng)
    critic = mstde_sweep(critic, traj,
                         learning_rate(config.alpha_critic, k, config.lr_decay_critic,
                                       config.lr_decay_start),
                         config.beta, config.gamma)
    idx = sample_rollout_indices(config.beta, config.dt, config.T, config.J, rng)
    samples = samples_from_trajectory(critic, traj, idx, config.beta)
    return traj, critic, samples


def cpg_iteration(env: EnvModel, policy, critic, config: AlgoConfig, k: int,
                  rng: np.random.Generator):
    """One policy-gradient iteration; returns (policy', critic', record)."""
    t0 = time.perf_counter()
    traj, critic, samples = _collect(env, policy, critic, config, k, rng)
    grad = cpg_gradient(samples, policy, config.gamma, config.beta, env.regularizer_kind)
    alpha = learning_rate(config.alpha_policy, k, config.lr_decay, config.lr_decay_start)
    new_policy = _updated_policy(policy, policy.to_vector() + alpha * grad, k)
    record = IterationRecord(
        k=k, theta=new_policy.to_vector(), phi=critic.to_vector(),
        mean_kl_step=mean_sqrt_kl(new_policy, policy, samples.states),
        grad_norm=float(np.linalg.norm(grad)),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return new_policy, critic, record


def cppo_iteration(env: EnvModel, policy, critic, penalty: PenaltyState,
                   config: AlgoConfig, k: int, rng: np.random.Generator,
                   variant: str = "sqrt"):
    """One proximal iteration; returns (policy', critic', penalty', record).

    Runs ``s_steps`` gradient-ascent steps on surrogate - C_penalty * Dbar
    from theta_k, then adapts the penalty constant on the realized Dbar.
    """
    if variant not in ("sqrt", "linear"):
        raise ConfigError(f"unknown proximal variant {variant!r}")
    t0 = time.perf_counter()
    traj, critic, samples = _collect(env, policy, critic, config, k, rng)
    alpha = learning_rate(config.alpha_policy, k, config.lr_decay, config.lr_decay_start)
    new_policy = policy
    for _ in range(config.s_steps):
        new_policy = _inner_ascent_step(new_policy, policy, samples, penalty.c_penalty,
                                        config, env.regularizer_kind, variant, alpha, k)
    if variant == "sqrt":
        measured = mean_sqrt_kl(new_policy, policy, samples.states)
    else:
        measured = mean_kl(new_policy, policy, samples.states)
    new_penalty = penalty_adapt(penalty, measured, config.delta_radius, config.epsilon_tol)
    record = IterationRecord(
        k=k, theta=new_policy.to_vector(), phi=critic.to_vector(),
        mean_kl_step=measured,
        grad_norm=float(np.linalg.norm(new_policy.to_vector() - policy.to_vector())),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        c_penalty=new_penalty.c_penalty,
    )
    return new_policy, critic, new_penalty, record


def _discrete_gradient(samples: OccupationSamples, policy, gamma: float, dt: float,
                       regularizer: str) -> np.ndarray:
    """Classical per-step policy gradient: score times one-step advantage.

    The advantage is the discrete TD residual r dt + e^{-beta dt} V' - V
    (no rate scaling), i.e. dt times the advantage-rate estimate; the
    entropy term enters with the same per-step weight.
    """
    adv = samples.q_hat * dt
    if regularizer == "entropy":
        w = adv + gamma * dt * samples.p_hat - gamma * dt
    else:
        w = adv
    n = len(samples)
    if isinstance(policy, GaussianLinearPolicy):
        return policy.score_batch(samples.states, samples.actions) @ w / n
    return policy.score_weighted_sum(_state_columns(samples.states), samples.actions, w) / n


def discrete_baseline_iteration(env: EnvModel, policy, critic, config: AlgoConfig,
                                k: int, rng: np.random.Generator, algo: str = "dpg",
                                penalty: Optional[PenaltyState] = None):
    """One iteration of the discrete-time baseline (classical PG or PPO).

    The grid rollout is treated as an MDP with per-step reward r dt and
    discount e^{-beta dt}; states are still sampled at Exponential(beta)
    rollout times (the matching geometric visitation law). The PPO baseline
    uses the linear-KL statistic with the same adaptive controller.
    Returns (policy', critic', record) for "dpg" and
    (policy', critic', penalty', record) for "dppo".
    """
    if algo not in ("dpg", "dppo"):
        raise ConfigError(f"unknown discrete baseline {algo!r}")
    t0 = time.perf_counter()
    traj, critic, samples = _collect(env, policy, critic, config, k, rng)
    alpha = learning_rate(config.alpha_policy, k, config.lr_decay, config.lr_decay_start)
    if algo == "dpg":
        grad = _discrete_gradient(samples, policy, config.gamma, config.dt,
                                  env.regularizer_kind)
        new_policy = _updated_policy(policy, policy.to_vector() + alpha * grad, k)
        record = IterationRecord(
            k=k, theta=new_policy.to_vector(), phi=critic.to_vector(),
            mean_kl_step=mean_sqrt_kl(new_policy, policy, samples.states),
            grad_norm=float(np.linalg.norm(grad)),
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        return new_policy, critic, record

    if penalty is None:
        penalty = PenaltyState(config.c_penalty_init)
    new_policy = policy
    # per-step advantage = dt * rate advantage, so the discrete surrogate is
    # the rate-scaled one multiplied by dt * beta
    scale = config.dt * config.beta
    for _ in range(config.s_steps):
        new_policy = _inner_ascent_step(new_policy, policy, samples, penalty.c_penalty,
                                        config, env.regularizer_kind, "linear", alpha,
                                        k, scale=scale)
    measured = mean_kl(new_policy, policy, samples.states)
    new_penalty = penalty_adapt(penalty, measured, config.delta_radius, config.epsilon_tol)
    record = IterationRecord(
        k=k, theta=new_policy.to_vector(), phi=critic.to_vector(),
        mean_kl_step=measured,
        grad_norm=float(np.linalg.norm(new_policy.to_vector() - policy.to_vector())),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        c_penalty=new_penalty.c_penalty,
    )
    return new_policy, critic, new_penalty, record


def soft_q_improvement(q_fn, gamma: float, x) -> SoftPolicy:
    """Soft improvement of a quadratic-in-action advantage rate.

    For q(x, .) strictly concave quadratic, the maximizing action
    distribution is the Boltzmann density proportional to exp(q / gamma):
    Gaussian with mean at the vertex and variance gamma / (-2 c2), where c2
    is the leading coefficient; gamma = 0 gives the greedy point mass.
    """
    q0 = float(q_fn(x, 0.0))
    qp = float(q_fn(x, 1.0))
    qm = float(q_fn(x, -1.0))
    c2 = 0.5 * (qp + qm) - q0
    c1 = 0.5 * (qp - qm)
    if c2 >= 0:
        raise ImprovementUndefinedError(
            f"advantage rate has non-negative leading coefficient {c2} in the action"
        )
    mean = -c1 / (2.0 * c2)
    variance = gamma / (-2.0 * c2) if gamma > 0 else 0.0
    return SoftPolicy(mean=mean, variance=variance)
