"""Controlled-SDE environment models and Euler-Maruyama trajectory generation.

An environment is the coefficient bundle of a controlled Ito process

    dX_s = b(X_s, a_s) ds + sigma(X_s, a_s) dB_s,

together with a running reward rate r(x, a) and an optional entropy
regularizer. Actions are sampled from a stochastic feedback policy by
external randomization, one draw per grid point, and the state is advanced
with the plain Euler-Maruyama scheme on a fixed grid t_i = i * dt. All
estimators downstream are defined on that grid, so no higher-order or
adaptive integrator is used.

Conventions
-----------
- ``drift(x, a)`` returns the state increment rate (shape ``(n,)``, scalar
  for 1-D states); ``diffusion(x, a)`` returns the n-by-m diffusion matrix.
  Environments with a single noise source may return the column as a 1-D
  array of length n (or a scalar when n = 1); shapes are normalized inside
  the stepper. All coefficient functions must be pure and broadcast over
  trailing batch axes.
- A trajectory records states, actions, reward rates and regularizer rates
  at the pre-step pair (X_{t_i}, a_{t_i}) for i = 0..N-1 with N * dt = T.
- Any non-finite state aborts the trajectory with `RolloutDivergedError`
  rather than clamping, so instability stays visible in experiments.

Pair-trading note: the wealth equation is implemented exactly as modeled,
``dW = a W (k (theta - S) + eta^2 / 2 + rho sigma eta + r_f) dt + eta W dB``;
the diffusion term carries no position factor ``a`` even though the drift
does. The learning problem is well-posed either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ConfigError",
    "RolloutDivergedError",
    "PolicyEnvMismatchError",
    "EnvModel",
    "LQParams",
    "PairTradingParams",
    "BoundedEnvParams",
    "Trajectory",
    "euler_step",
    "rollout",
    "make_lq_env",
    "make_pair_trading_env",
    "make_ou_env",
    "make_bounded_env",
    "n_grid_steps",
]


class ConfigError(ValueError):
    """A parameter bundle violates one of its documented invariants."""


class RolloutDivergedError(RuntimeError):
    """An SDE trajectory produced a non-finite state or reward.

    Attributes:
        step: grid index at which the divergence was detected (None for
            the single-step operation).
    """

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class PolicyEnvMismatchError(RuntimeError):
    """A policy produced an action outside the environment's action space."""


def n_grid_steps(T: float, dt: float) -> int:
    """Number of grid steps N with N * dt = T; raises if T is not a grid multiple."""
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if T <= 0:
        raise ConfigError(f"horizon T must be positive, got {T}")
    n = round(T / dt)
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ConfigError(f"T={T} is not an integer multiple of dt={dt}")
    return n


@dataclass(frozen=True)
class EnvModel:
    """Coefficient bundle defining one controlled SDE.

    ``family`` tags environments with known closed forms ("lq", "pairs",
    "ou", "bounded", or "generic"); ``params`` keeps the originating
    parameter bundle for oracle lookups. ``feature_map`` is an optional
    state transform applied by function approximators (identity if None).
    """

    state_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    reward: Callable
    regularizer_kind: str = "none"  # "none" | "entropy"
    action_low: float = -math.inf
    action_high: float = math.inf
    family: str = "generic"
    params: object = None
    feature_map: Optional[Callable] = None

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ConfigError("state_dim and noise_dim must be positive")
        if self.regularizer_kind not in ("none", "entropy"):
            raise ConfigError(f"unknown regularizer_kind {self.regularizer_kind!r}")
        if not self.action_low < self.action_high:
            raise ConfigError("action_low must be below action_high")

    @property
    def bounded_actions(self) -> bool:
        return math.isfinite(self.action_low) or math.isfinite(self.action_high)


@dataclass(frozen=True)
class LQParams:
    """Scalar linear dynamics with quadratic reward.

    Drift A x + B a, diffusion C x + D a, reward
    -(M/2 x^2 + R x a + N/2 a^2 + P x + Q a), entropy regularizer with
    temperature gamma, discount beta.
    """

    A: float = -1.0
    B: float = 0.0
    C: float = 0.0
    D: float = 1.0
    M_cost: float = 2.0
    N_cost: float = 2.0
    R: float = 1.0
    P: float = 1.0
    Q: float = 2.0
    beta: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        if self.N_cost <= 0:
            raise ConfigError(f"N_cost > 0 violated: N_cost={self.N_cost}")
        if self.M_cost < 0:
            raise ConfigError(f"M_cost >= 0 violated: M_cost={self.M_cost}")
        if self.R**2 >= self.M_cost * self.N_cost:
            raise ConfigError(
                f"R^2 < M_cost*N_cost violated: R^2={self.R**2}, "
                f"M_cost*N_cost={self.M_cost * self.N_cost}"
            )
        if self.gamma < 0:
            raise ConfigError(f"gamma >= 0 violated: gamma={self.gamma}")
        bound = (
            2 * self.A
            + self.C**2
            + max(
                (self.D**2 * self.R**2 - 2 * self.N_cost * self.R * (self.B + self.C * self.D))
                / self.N_cost,
                0.0,
            )
        )
        if self.beta <= bound:
            raise ConfigError(
                f"discount admissibility beta > 2A + C^2 + max((D^2 R^2 - 2 N R (B+CD))/N, 0) "
                f"violated: beta={self.beta}, bound={bound}"
            )


@dataclass(frozen=True)
class PairTradingParams:
    """Mean-reverting spread plus wealth, with position bounded in [-ell, ell]."""

    k: float = 0.01
    theta_mean: float = 7.0
    eta: float = 0.1
    rho: float = 0.3
    sigma: float = 1.0
    r_f: float = 0.01
    ell: float = 5.0
    s0: Optional[float] = None  # default: theta_mean
    w0: float = 1.0

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"k >= 0 violated: k={self.k}")
        if self.eta <= 0:
            raise ConfigError(f"eta > 0 violated: eta={self.eta}")
        if self.ell <= 0:
            raise ConfigError(f"ell > 0 violated: ell={self.ell}")
        if self.w0 <= -1:
            raise ConfigError(f"w0 > -1 violated: w0={self.w0}")

    @property
    def x0(self) -> np.ndarray:
        s0 = self.theta_mean if self.s0 is None else self.s0
        return np.array([s0, self.w0], dtype=float)


@dataclass(frozen=True)
class BoundedEnvParams:
    """Synthetic 1-D test environment with bounded coefficients.

    Drift -pull * x + tanh(a) and constant diffusion ``noise``, so the
    aggregated drift is globally Lipschitz, the aggregated diffusion is
    policy-independent, and every coupling constant is known analytically.
    Used only by the verification machinery.
    """

    pull: float = 0.05
    noise: float = 0.2

    def __post_init__(self):
        if self.pull < 0:
            raise ConfigError(f"pull >= 0 violated: pull={self.pull}")
        if self.noise <= 0:
            raise ConfigError(f"noise > 0 violated: noise={self.noise}")


@dataclass
class Trajectory:
    """Time-gridded record of one rollout.

    All arrays have length ``n_steps``; entry i holds the pre-step pair at
    t_i = i * dt. States are shaped ``(n_steps,)`` for 1-D environments and
    ``(n_steps, n)`` otherwise.
    """

    dt: float
    n_steps: int
    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    reg_values: np.ndarray

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt


def _normalize_diffusion(sig, n: int, m: int) -> np.ndarray:
    s = np.asarray(sig, dtype=float)
    if s.ndim == 0:
        if n == 1 and m == 1:
            return s.reshape(1, 1)
        raise ConfigError(f"diffusion returned a scalar for an {n}x{m} environment")
    if s.ndim == 1:
        if s.size == n and m == 1:
            return s.reshape(n, 1)
        raise ConfigError(f"diffusion shape {s.shape} incompatible with ({n}, {m})")
    if s.shape != (n, m):
        raise ConfigError(f"diffusion shape {s.shape} incompatible with ({n}, {m})")
    return s


def euler_step(env: EnvModel, x, a, dt: float, z):
    """One Euler-Maruyama step: x + b(x,a) dt + sigma(x,a) z sqrt(dt).

    ``z`` holds one standard normal draw per noise coordinate, supplied by
    the caller's RNG. Scalar input state yields a scalar output.
    """
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    scalar = np.ndim(x) == 0
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    zv = np.atleast_1d(np.asarray(z, dtype=float))
    n, m = env.state_dim, env.noise_dim
    if xv.shape != (n,):
        raise ConfigError(f"state shape {xv.shape} incompatible with n={n}")
    if zv.shape != (m,):
        raise ConfigError(f"noise shape {zv.shape} incompatible with m={m}")
    with np.errstate(all="ignore"):
        b = np.atleast_1d(np.asarray(env.drift(x, a), dtype=float))
        sig = _normalize_diffusion(env.diffusion(x, a), n, m)
        out = xv + b * dt + sig @ zv * math.sqrt(dt)
    if not np.all(np.isfinite(out)):
        raise RolloutDivergedError("non-finite state after Euler step")
    return float(out[0]) if scalar else out


def _check_action(env: EnvModel, a: float) -> None:
    if a < env.action_low or a > env.action_high:
        raise PolicyEnvMismatchError(
            f"action {a} outside env action space [{env.action_low}, {env.action_high}]"
        )


def rollout(env: EnvModel, policy, x0, T: float, dt: float, rng: np.random.Generator) -> Trajectory:
    """Simulate one trajectory of horizon T on the dt grid under ``policy``.

    At each grid point an action is drawn from pi(. | X_{t_i}), the reward
    and regularizer rates are recorded at the pre-step pair, and the state
    is advanced one Euler step. Fully deterministic given the generator
    state: the N noise increments are drawn first as one block, then the
    policy's own draws are consumed stepwise.
    """
    N = n_grid_steps(T, dt)
    n, m = env.state_dim, env.noise_dim
    sqrt_dt = math.sqrt(dt)
    entropy = env.regularizer_kind == "entropy"
    times = np.arange(N) * dt
    rewards = np.empty(N)
    regs = np.zeros(N)
    actions = np.empty(N)

    z_block = rng.standard_normal((N, m)) if m > 1 else rng.standard_normal(N)

    if n == 1:
        states = np.empty(N)
        # presampled Gaussian fast path: one normal per grid point
        from .policies import GaussianLinearPolicy

        fast = isinstance(policy, GaussianLinearPolicy)
        zs = z_block.tolist()
        if fast:
            zetas = rng.standard_normal(N).tolist()
            mean_slope, mean_icept = policy.theta1, policy.theta2
            std = math.exp(0.5 * policy.theta3)
            var = std * std
            # matches gauss_log_density term by term (same op order)
            log_norm = 0.5 * math.log(2.0 * math.pi * var)
        drift, diffusion, reward = env.drift, env.diffusion, env.reward
        lo, hi = env.action_low, env.action_high
        x = float(x0) if np.ndim(x0) == 0 else float(np.asarray(x0).reshape(()))
        try:
            np_err = np.seterr(all="ignore")
            for i in range(N):
                if fast:
                    mean = mean_slope * x + mean_icept
                    a = mean + std * zetas[i]
                else:
                    a = policy.sample(x, rng)
                if a < lo or a > hi:
                    raise PolicyEnvMismatchError(
                        f"action {a} outside env action space [{lo}, {hi}]"
                    )
                states[i] = x
                actions[i] = a
                rewards[i] = reward(x, a)
                if entropy:
                    if fast:
                        d = a - mean
                        regs[i] = log_norm + d * d / (2.0 * var)
                    else:
                        regs[i] = -policy.log_density(x, a)
                x = x + drift(x, a) * dt + diffusion(x, a) * zs[i] * sqrt_dt
                if not math.isfinite(x):
                    raise RolloutDivergedError("non-finite state", step=i)
        except (ValueError, OverflowError) as exc:
            raise RolloutDivergedError(f"numeric failure: {exc}", step=i) from exc
        finally:
            np.seterr(**np_err)
    else:
        states = np.empty((N, n))
        x = np.asarray(x0, dtype=float).reshape(n).copy()
        with np.errstate(all="ignore"):
            for i in range(N):
                a = policy.sample(x, rng)
                _check_action(env, a)
                states[i] = x
                actions[i] = a
                rewards[i] = env.reward(x, a)
                if entropy:
                    regs[i] = -policy.log_density(x, a)
                b = np.asarray(env.drift(x, a), dtype=float)
                sig = env.diffusion(x, a)
                if m == 1:
                    s = np.asarray(sig, dtype=float).reshape(n)
                    x = x + b * dt + s * (float(z_block[i]) * sqrt_dt)
                else:
                    s2 = _normalize_diffusion(sig, n, m)
                    x = x + b * dt + s2 @ z_block[i] * sqrt_dt
                if not np.all(np.isfinite(x)):
                    raise RolloutDivergedError("non-finite state", step=i)

    bad = ~np.isfinite(rewards)
    if bad.any():
        raise RolloutDivergedError("non-finite reward", step=int(np.argmax(bad)))
    if entropy:
        bad = ~np.isfinite(regs)
        if bad.any():
            raise RolloutDivergedError("non-finite regularizer rate", step=int(np.argmax(bad)))
    return Trajectory(dt=dt, n_steps=N, times=times, states=states, actions=actions,
                      rewards=rewards, reg_values=regs)


def make_lq_env(p: LQParams) -> EnvModel:
    """1-D environment with linear dynamics, quadratic reward, entropy regularizer."""
    A, B, C, D = p.A, p.B, p.C, p.D
    M, N_, R, P, Q = p.M_cost, p.N_cost, p.R, p.P, p.Q

    def drift(x, a):
        return A * x + B * a

    def diffusion(x, a):
        return C * x + D * a

    def reward(x, a):
        return -(0.5 * M * x * x + R * x * a + 0.5 * N_ * a * a + P * x + Q * a)

    return EnvModel(state_dim=1, noise_dim=1, drift=drift, diffusion=diffusion,
                    reward=reward, regularizer_kind="entropy", family="lq", params=p)


def make_pair_trading_env(p: PairTradingParams) -> EnvModel:
    """2-D spread/wealth environment; one Brownian motion drives both equations."""
    k, theta, eta = p.k, p.theta_mean, p.eta
    wealth_carry = 0.5 * eta**2 + p.rho * p.sigma * eta + p.r_f

    def drift(x, a):
        s, w = x[0], x[1]
        pull = k * (theta - s)
        return np.stack([pull, a * w * (pull + wealth_carry)])

    def diffusion(x, a):
        s, w = x[0], x[1]
        return np.stack([np.broadcast_to(eta, np.shape(s)).astype(float), eta * w])

    def reward(x, a):
        return np.log1p(x[1])

    def features(x):
        # O(1)-scaled inputs for the tanh networks: centered spread, log wealth
        return np.stack([x[0] - theta, np.log1p(x[1])])

    return EnvModel(state_dim=2, noise_dim=1, drift=drift, diffusion=diffusion,
                    reward=reward, regularizer_kind="none",
                    action_low=-p.ell, action_high=p.ell,
                    family="pairs", params=p, feature_map=features)


def make_ou_env(rate: float = 1.0, vol: float = 1.0) -> EnvModel:
    """Action-free Ornstein-Uhlenbeck test process dX = -rate X dt + vol dB."""

    def drift(x, a):
        return -rate * x

    def diffusion(x, a):
        return vol + 0.0 * a  # constant, broadcast against batched actions

    def reward(x, a):
        return 0.0 * x

    return EnvModel(state_dim=1, noise_dim=1, drift=drift, diffusion=diffusion,
                    reward=reward, regularizer_kind="none", family="ou",
                    params={"rate": rate, "vol": vol})


def make_bounded_env(p: BoundedEnvParams = BoundedEnvParams()) -> EnvModel:
    """Synthetic bounded environment for coupling and moment-bound checks."""
    pull, noise = p.pull, p.noise

    def drift(x, a):
        return -pull * x + np.tanh(a)

    def diffusion(x, a):
        return noise + 0.0 * a

    def reward(x, a):
        return 0.0 * x

    return EnvModel(state_dim=1, noise_dim=1, drift=drift, diffusion=diffusion,
                    reward=reward, regularizer_kind="none", family="bounded", params=p)


def batch_states_step(env: EnvModel, x, a, z, dt: float):
    """Advance a batch of states one Euler step (single shared-noise column).

    ``x`` is ``(B,)`` for 1-D environments or ``(n, B)``; ``a`` and ``z`` are
    ``(B,)``. Requires ``noise_dim == 1``; coefficient functions broadcast.
    """
    if env.noise_dim != 1:
        raise ConfigError("batched stepping supports single-noise environments only")
    return x + env.drift(x, a) * dt + env.diffusion(x, a) * (z * math.sqrt(dt))
