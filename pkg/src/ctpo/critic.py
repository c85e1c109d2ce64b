"""Value-function approximators and the temporal-difference machinery.

The critic is trained online by stochastic approximation of the martingale
condition for the discounted value process: with test function
dV/dphi, each grid transition contributes the update

    phi <- phi + alpha * (dV^phi(X_i)/dphi)
                 * [V(X_{i+1}) - V(X_i) + r_i dt + gamma p_i dt - beta V(X_i) dt],

the one-step grid difference standing in for dV. This is the mean-squared
TD error method; updates sweep a collected trajectory once, in order.

The advantage-rate estimator used by both training algorithms is

    q_hat_i = (r_i dt + e^{-beta dt} V(X_{i+1}) - V(X_i)) / dt,

the rate-scaled one-step advantage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .nets import (mlp_backward, mlp_forward, mlp_from_vector, mlp_init,
                   mlp_to_vector, mlp_views)
from .sde import ConfigError, Trajectory

__all__ = ["QuadraticCritic", "MLPCritic", "QEstimate",
           "mstde_update", "mstde_sweep", "q_estimate", "q_estimate_batch"]


@dataclass(frozen=True)
class QuadraticCritic:
    """V(x) = phi2 x^2 / 2 + phi1 x + phi0 on a scalar state."""

    phi0: float
    phi1: float
    phi2: float

    def value(self, x):
        return 0.5 * self.phi2 * x * x + self.phi1 * x + self.phi0

    def value_batch(self, x):
        return self.value(np.asarray(x))

    def value_gradient(self, x):
        """dV/dphi = (1, x, x^2/2)."""
        return np.array([1.0, x, 0.5 * x * x])

    def to_vector(self) -> np.ndarray:
        return np.array([self.phi0, self.phi1, self.phi2])

    def with_vector(self, vec) -> "QuadraticCritic":
        return QuadraticCritic(float(vec[0]), float(vec[1]), float(vec[2]))

    @property
    def n_params(self) -> int:
        return 3


class MLPCritic:
    """Scalar-output 3-layer tanh network critic.

    ``features`` optionally transforms the raw state before the network
    (shared with the policy for environments that declare one).
    """

    def __init__(self, sizes, weights=None, rng: Optional[np.random.Generator] = None,
                 features: Optional[Callable] = None):
        if sizes[-1] != 1:
            raise ConfigError("critic network must have one output")
        self.sizes = tuple(sizes)
        self.features = features
        if weights is None:
            if rng is None:
                raise ConfigError("either weights or rng must be supplied")
            weights = mlp_init(sizes, rng)
        self.weights = weights

    def _feat_single(self, x):
        f = np.asarray(x, dtype=float) if self.features is None else self.features(x)
        return np.atleast_1d(f)

    def _feat_batch(self, X):
        f = np.asarray(X, dtype=float) if self.features is None else self.features(X)
        return f[None, :] if f.ndim == 1 else f

    def value(self, x) -> float:
        out, _ = mlp_forward(self.weights, self._feat_single(x))
        return float(out[0])

    def value_batch(self, X):
        out, _ = mlp_forward(self.weights, self._feat_batch(X))
        return out[0]

    def value_gradient(self, x) -> np.ndarray:
        _, cache = mlp_forward(self.weights, self._feat_single(x))
        return mlp_backward(self.weights, cache, np.array([1.0]))

    def to_vector(self) -> np.ndarray:
        return mlp_to_vector(self.weights)

    def with_vector(self, vec) -> "MLPCritic":
        return MLPCritic(self.sizes, weights=mlp_from_vector(self.sizes, np.asarray(vec, dtype=float)),
                         features=self.features)

    @property
    def n_params(self) -> int:
        return self.to_vector().size


@dataclass(frozen=True)
class QEstimate:
    """One advantage-rate sample q_hat at a (state, action, grid index)."""

    value: float
    state: object
    action: float
    index: int


def _td_bracket(v0: float, v1: float, r: float, p: float, beta: float, gamma: float,
                dt: float) -> float:
    return v1 - v0 + r * dt + gamma * p * dt - beta * v0 * dt


def mstde_update(critic, traj: Trajectory, i: int, alpha: float, beta: float,
                 gamma: float):
    """One TD update at transition i -> i+1; returns the updated critic."""
    if not 0 <= i < traj.n_steps - 1:
        raise ConfigError(f"transition index {i} outside [0, {traj.n_steps - 2}]")
    dt = traj.dt
    if isinstance(critic, QuadraticCritic):
        x0 = float(traj.states[i])
        x1 = float(traj.states[i + 1])
        v0 = critic.value(x0)
        bracket = _td_bracket(v0, critic.value(x1), float(traj.rewards[i]),
                              float(traj.reg_values[i]), beta, gamma, dt)
        step = alpha * bracket
        return QuadraticCritic(critic.phi0 + step, critic.phi1 + step * x0,
                               critic.phi2 + step * 0.5 * x0 * x0)
    x0, x1 = traj.states[i], traj.states[i + 1]
    pair = np.stack([critic._feat_single(x0), critic._feat_single(x1)], axis=-1)
    out, cache = mlp_forward(critic.weights, pair)
    bracket = _td_bracket(float(out[0, 0]), float(out[0, 1]), float(traj.rewards[i]),
                          float(traj.reg_values[i]), beta, gamma, dt)
    grad = mlp_backward(critic.weights, cache, np.array([[alpha * bracket, 0.0]]))
    return critic.with_vector(critic.to_vector() + grad)


def mstde_sweep(critic, traj: Trajectory, alpha: float, beta: float, gamma: float):
    """Apply the TD update for i = 0..N-2 in order, once through the trajectory."""
    dt = traj.dt
    if isinstance(critic, QuadraticCritic):
        phi0, phi1, phi2 = critic.phi0, critic.phi1, critic.phi2
        states = traj.states.tolist()
        rewards = traj.rewards.tolist()
        regs = traj.reg_values.tolist()
        x1 = states[0]
        for i in range(traj.n_steps - 1):
            x0 = x1
            x1 = states[i + 1]
            v0 = 0.5 * phi2 * x0 * x0 + phi1 * x0 + phi0
            v1 = 0.5 * phi2 * x1 * x1 + phi1 * x1 + phi0
            bracket = v1 - v0 + rewards[i] * dt + gamma * regs[i] * dt - beta * v0 * dt
            step = alpha * bracket
            phi0 += step
            phi1 += step * x0
            phi2 += step * 0.5 * x0 * x0
        return QuadraticCritic(phi0, phi1, phi2)

    buf = critic.to_vector().copy()
    weights = mlp_views(critic.sizes, buf)
    feats = critic._feat_batch(traj.states.T)  # (d, N)
    seed = np.zeros((1, 2))
    for i in range(traj.n_steps - 1):
        pair = feats[:, i : i + 2]
        out, cache = mlp_forward(weights, pair)
        bracket = _td_bracket(float(out[0, 0]), float(out[0, 1]), float(traj.rewards[i]),
                              float(traj.reg_values[i]), beta, gamma, dt)
        seed[0, 0] = alpha * bracket
        buf += mlp_backward(weights, cache, seed)
    return type(critic)(critic.sizes, weights=mlp_views(critic.sizes, buf),
                        features=critic.features)


def q_estimate(critic, traj: Trajectory, i: int, beta: float) -> QEstimate:
    """Advantage-rate sample at grid index i (needs the i+1 state)."""
    if not 0 <= i < traj.n_steps - 1:
        raise ConfigError(f"transition index {i} outside [0, {traj.n_steps - 2}]")
    dt = traj.dt
    x0, x1 = traj.states[i], traj.states[i + 1]
    val = (traj.rewards[i] * dt + math.exp(-beta * dt) * critic.value(x1)
           - critic.value(x0)) / dt
    return QEstimate(value=float(val), state=x0, action=float(traj.actions[i]), index=i)


def q_estimate_batch(critic, traj: Trajectory, indices, beta: float) -> np.ndarray:
    """Vectorized advantage-rate estimates at several grid indices."""
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= traj.n_steps - 1):
        raise ConfigError("transition index outside [0, N-2]")
    dt = traj.dt
    if isinstance(critic, QuadraticCritic):
        v0 = critic.value(traj.states[idx])
        v1 = critic.value(traj.states[idx + 1])
    else:
        v0 = critic.value_batch(traj.states[idx].T)
        v1 = critic.value_batch(traj.states[idx + 1].T)
    return (traj.rewards[idx] * dt + math.exp(-beta * dt) * v1 - v0) / dt
