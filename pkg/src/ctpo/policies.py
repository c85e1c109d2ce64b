"""Parametric stochastic feedback policies.

Two families:

- `GaussianLinearPolicy`: pi(. | x) = Normal(theta1 * x + theta2, exp(theta3)),
  so exp(theta3) is the *variance*. Sampling, log-density, score and KL all
  have closed forms.
- `BetaMLPPolicy`: actions on [-ell, ell] through a scaled Beta distribution
  whose shape parameters alpha(x), beta(x) are the two heads of a shared
  3-layer tanh network. Head outputs pass through softplus(.) + 1e-3 so both
  shapes stay positive; the 1/(2 ell) change-of-variables term is included
  in the log-density.

Policies are immutable value objects. Every operation is pure except
sampling, which consumes the caller's generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import betaln, digamma, expit

from .nets import mlp_backward, mlp_forward, mlp_from_vector, mlp_init, mlp_to_vector
from .sde import ConfigError, EnvModel

__all__ = [
    "OutOfSupportError",
    "QuadratureError",
    "GaussianLinearPolicy",
    "BetaMLPPolicy",
    "gauss_log_density",
    "gauss_entropy",
    "kl_divergence",
    "regularizer_rate",
    "aggregated_coefficients",
    "aggregated_drift_batch",
    "aggregated_sigma2_batch",
]

_SHAPE_FLOOR = 1e-3  # added to softplus outputs, keeps Beta shapes positive


class OutOfSupportError(ValueError):
    """Score requested at an action outside the policy's support."""


class QuadratureError(RuntimeError):
    """Aggregated-coefficient quadrature failed to reach its tolerance."""

    def __init__(self, message: str, estimate=None, tolerance=None):
        super().__init__(message)
        self.estimate = estimate
        self.tolerance = tolerance


def gauss_log_density(a: float, mean: float, var: float) -> float:
    d = a - mean
    return -0.5 * math.log(2.0 * math.pi * var) - d * d / (2.0 * var)


def gauss_entropy(var: float) -> float:
    """Differential entropy of Normal(., var): log(2 pi e var) / 2."""
    return 0.5 * math.log(2.0 * math.pi * math.e * var)


@dataclass(frozen=True)
class GaussianLinearPolicy:
    """Normal(theta1 * x + theta2, exp(theta3)) feedback policy on the real line."""

    theta1: float
    theta2: float
    theta3: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.theta1, self.theta2, self.theta3))):
            raise ConfigError("policy parameters must be finite")
        if not -700.0 < self.theta3 < 700.0:
            raise ConfigError(f"policy variance exp({self.theta3}) outside float range")

    @property
    def variance(self) -> float:
        return math.exp(self.theta3)

    @property
    def std(self) -> float:
        return math.exp(0.5 * self.theta3)

    def mean(self, x):
        return self.theta1 * x + self.theta2

    def sample(self, x, rng: np.random.Generator) -> float:
        return self.mean(x) + self.std * rng.standard_normal()

    def sample_batch(self, x, rng: np.random.Generator):
        return self.mean(x) + self.std * rng.standard_normal(np.shape(x))

    def log_density(self, x, a) -> float:
        return gauss_log_density(a, self.mean(x), self.variance)

    def log_density_batch(self, x, a):
        d = a - self.mean(x)
        v = self.variance
        return -0.5 * math.log(2.0 * math.pi * v) - d * d / (2.0 * v)

    def score(self, x, a) -> np.ndarray:
        """Gradient of log-density in (theta1, theta2, theta3)."""
        v = self.variance
        d = a - self.mean(x)
        return np.array([d * x / v, d / v, -0.5 + d * d / (2.0 * v)])

    def score_batch(self, x, a) -> np.ndarray:
        """(3, B) matrix of per-sample scores."""
        v = self.variance
        d = np.asarray(a) - self.mean(np.asarray(x))
        return np.stack([d * np.asarray(x) / v, d / v, -0.5 + d * d / (2.0 * v)])

    def in_support(self, a) -> bool:
        return bool(np.isfinite(a))

    def to_vector(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3])

    def with_vector(self, vec) -> "GaussianLinearPolicy":
        return GaussianLinearPolicy(float(vec[0]), float(vec[1]), float(vec[2]))

    @property
    def n_params(self) -> int:
        return 3


class BetaMLPPolicy:
    """Beta policy on [-ell, ell] with network-valued shape parameters.

    The shared trunk is a 3-layer tanh network with a 2-dimensional output
    head (raw alpha, raw beta). ``features`` optionally transforms the raw
    state before the network (used by environments whose natural state
    scale would saturate tanh units).
    """

    def __init__(self, sizes, ell: float, weights=None, rng: Optional[np.random.Generator] = None,
                 features: Optional[Callable] = None):
        if sizes[-1] != 2:
            raise ConfigError("Beta policy network must have 2 output heads")
        if ell <= 0:
            raise ConfigError("ell > 0 required")
        self.sizes = tuple(sizes)
        self.ell = float(ell)
        self.features = features
        if weights is None:
            if rng is None:
                raise ConfigError("either weights or rng must be supplied")
            weights = mlp_init(sizes, rng)
        self.weights = weights

    # -- shape parameters ------------------------------------------------
    def _feat_single(self, x):
        f = np.asarray(x, dtype=float) if self.features is None else self.features(x)
        return np.atleast_1d(f)

    def _feat_batch(self, X):
        """Feature columns (d, B); 1-D inputs are batches of scalar states."""
        f = np.asarray(X, dtype=float) if self.features is None else self.features(X)
        return f[None, :] if f.ndim == 1 else f

    def shape_params(self, x):
        """(alpha, beta) at one state."""
        raw, _ = mlp_forward(self.weights, self._feat_single(x))
        ab = np.logaddexp(0.0, raw) + _SHAPE_FLOOR
        return float(ab[0]), float(ab[1])

    def shape_params_batch(self, X):
        """(alpha, beta) arrays over a state batch."""
        raw, _ = mlp_forward(self.weights, self._feat_batch(X))
        ab = np.logaddexp(0.0, raw) + _SHAPE_FLOOR
        return ab[0], ab[1]

    def _forward_cached(self, x):
        raw, cache = mlp_forward(self.weights, self._feat_single(x))
        ab = np.logaddexp(0.0, raw) + _SHAPE_FLOOR
        return raw, ab, cache

    # -- sampling / density ----------------------------------------------
    def _clip_unit(self, u):
        eps = 1e-12
        return np.clip(u, eps, 1.0 - eps)

    def sample(self, x, rng: np.random.Generator) -> float:
        alpha, beta = self.shape_params(x)
        u = self._clip_unit(rng.beta(alpha, beta))
        return float((2.0 * u - 1.0) * self.ell)

    def sample_batch(self, X, rng: np.random.Generator):
        alpha, beta = self.shape_params_batch(X)
        u = self._clip_unit(rng.beta(alpha, beta))
        return (2.0 * u - 1.0) * self.ell

    def in_support(self, a) -> bool:
        return -self.ell < a < self.ell

    def log_density(self, x, a) -> float:
        if not self.in_support(a):
            return -math.inf
        alpha, beta = self.shape_params(x)
        u = (a + self.ell) / (2.0 * self.ell)
        return ((alpha - 1.0) * math.log(u) + (beta - 1.0) * math.log1p(-u)
                - betaln(alpha, beta) - math.log(2.0 * self.ell))

    def log_density_batch(self, X, a):
        alpha, beta = self.shape_params_batch(X)
        u = self._clip_unit((np.asarray(a) + self.ell) / (2.0 * self.ell))
        return ((alpha - 1.0) * np.log(u) + (beta - 1.0) * np.log1p(-u)
                - betaln(alpha, beta) - math.log(2.0 * self.ell))

    # -- differentiation ---------------------------------------------------
    def _density_seed(self, raw, alpha, beta, u):
        """Per-sample seed on the raw heads for d log pi / d theta."""
        dla = np.log(u) - digamma(alpha) + digamma(alpha + beta)
        dlb = np.log1p(-u) - digamma(beta) + digamma(alpha + beta)
        return np.stack([dla * expit(raw[0]), dlb * expit(raw[1])])

    def score(self, x, a) -> np.ndarray:
        if not self.in_support(a):
            raise OutOfSupportError(f"action {a} outside (-{self.ell}, {self.ell})")
        raw, ab, cache = self._forward_cached(x)
        u = (a + self.ell) / (2.0 * self.ell)
        seed = self._density_seed(raw, ab[0], ab[1], u)
        return mlp_backward(self.weights, cache, seed)

    def score_weighted_sum(self, X, a, w) -> np.ndarray:
        """sum_j w_j * score(x_j, a_j) in a single backward pass."""
        raw, cache = mlp_forward(self.weights, self._feat_batch(X))
        ab = np.logaddexp(0.0, raw) + _SHAPE_FLOOR
        u = self._clip_unit((np.asarray(a) + self.ell) / (2.0 * self.ell))
        seed = self._density_seed(raw, ab[0], ab[1], u) * np.asarray(w)
        return mlp_backward(self.weights, cache, seed)

    # -- parameter vector --------------------------------------------------
    def to_vector(self) -> np.ndarray:
        return mlp_to_vector(self.weights)

    def with_vector(self, vec) -> "BetaMLPPolicy":
        return BetaMLPPolicy(self.sizes, self.ell,
                             weights=mlp_from_vector(self.sizes, np.asarray(vec, dtype=float)),
                             features=self.features)

    @property
    def n_params(self) -> int:
        return self.to_vector().size


def _beta_kl(a1, b1, a2, b2):
    """KL(Beta(a1,b1) || Beta(a2,b2)); the interval rescaling cancels."""
    return (betaln(a2, b2) - betaln(a1, b1)
            + (a1 - a2) * digamma(a1) + (b1 - b2) * digamma(b1)
            + (a2 - a1 + b2 - b1) * digamma(a1 + b1))


def kl_divergence(p_new, p_old, x) -> float:
    """KL(p_new(.|x) || p_old(.|x)) in closed form. Always >= 0."""
    if isinstance(p_new, GaussianLinearPolicy) and isinstance(p_old, GaussianLinearPolicy):
        m1, v1 = p_new.mean(x), p_new.variance
        m2, v2 = p_old.mean(x), p_old.variance
        return 0.5 * math.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5
    if isinstance(p_new, BetaMLPPolicy) and isinstance(p_old, BetaMLPPolicy):
        if p_new.ell != p_old.ell:
            raise TypeError("Beta policies with different action ranges")
        a1, b1 = p_new.shape_params(x)
        a2, b2 = p_old.shape_params(x)
        return float(_beta_kl(a1, b1, a2, b2))
    raise TypeError(
        f"cannot mix policy families {type(p_new).__name__} and {type(p_old).__name__}"
    )


def kl_divergence_batch(p_new, p_old, X):
    """Per-state KL over a state batch (columns of X for vector states)."""
    if isinstance(p_new, GaussianLinearPolicy) and isinstance(p_old, GaussianLinearPolicy):
        m1, v1 = p_new.mean(np.asarray(X)), p_new.variance
        m2, v2 = p_old.mean(np.asarray(X)), p_old.variance
        return 0.5 * math.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5
    if isinstance(p_new, BetaMLPPolicy) and isinstance(p_old, BetaMLPPolicy):
        a1, b1 = p_new.shape_params_batch(X)
        a2, b2 = p_old.shape_params_batch(X)
        return _beta_kl(a1, b1, a2, b2)
    raise TypeError("cannot mix policy families")


def regularizer_rate(env: EnvModel, policy, x, a) -> float:
    """0 when the environment has no regularizer, -log pi(a|x) for entropy."""
    if env.regularizer_kind == "none":
        return 0.0
    return -policy.log_density(x, a)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(32)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(math.pi)


def _sigma2_from(env: EnvModel, x, a) -> np.ndarray:
    from .sde import _normalize_diffusion

    s = _normalize_diffusion(env.diffusion(x, a), env.state_dim, env.noise_dim)
    return s @ s.T


def aggregated_coefficients(env: EnvModel, policy, x, mc_samples: int = 10_000,
                            mc_rtol: float = 0.05,
                            rng: Optional[np.random.Generator] = None):
    """Policy-averaged drift and squared diffusion at a state.

    Returns ``(b_tilde, sigma2_tilde)`` with shapes ``(n,)`` and ``(n, n)``:
    the drift averaged over a ~ pi(.|x) and the average of sigma sigma^T.
    Closed form for the linear-quadratic family under a Gaussian policy,
    32-point Gauss-Hermite quadrature for Gaussian policies on general
    environments, Monte Carlo otherwise (with a standard-error tolerance).
    """
    n = env.state_dim
    if env.family == "lq" and isinstance(policy, GaussianLinearPolicy):
        p = env.params
        m, v = policy.mean(x), policy.variance
        b = np.array([p.A * x + p.B * m])
        s2 = np.array([[(p.C * x + p.D * m) ** 2 + p.D**2 * v]])
        return b, s2
    if isinstance(policy, GaussianLinearPolicy):
        m, v = policy.mean(x), policy.variance
        nodes = m + math.sqrt(2.0 * v) * _GH_NODES
        b = np.zeros(n)
        s2 = np.zeros((n, n))
        for w, a in zip(_GH_WEIGHTS, nodes):
            b += w * np.atleast_1d(np.asarray(env.drift(x, a), dtype=float))
            s2 += w * _sigma2_from(env, x, a)
        return b, s2
    if rng is None:
        rng = np.random.default_rng(0)
    draws_b = np.empty((mc_samples, n))
    draws_s2 = np.empty((mc_samples, n, n))
    for i in range(mc_samples):
        a = policy.sample(x, rng)
        draws_b[i] = np.atleast_1d(np.asarray(env.drift(x, a), dtype=float))
        draws_s2[i] = _sigma2_from(env, x, a)
    b = draws_b.mean(axis=0)
    s2 = draws_s2.mean(axis=0)
    se = max(draws_b.std(axis=0, ddof=1).max(), draws_s2.std(axis=0, ddof=1).max())
    se /= math.sqrt(mc_samples)
    scale = max(1.0, float(np.abs(b).max()), float(np.abs(s2).max()))
    if se > mc_rtol * scale:
        raise QuadratureError(
            f"Monte Carlo aggregation SE {se:.3g} exceeds tolerance {mc_rtol * scale:.3g}",
            estimate=(b, s2), tolerance=mc_rtol * scale,
        )
    return b, s2


def aggregated_drift_batch(env: EnvModel, policy, x):
    """Vectorized policy-averaged drift over a batch of 1-D states."""
    if env.family == "lq" and isinstance(policy, GaussianLinearPolicy):
        p = env.params
        return p.A * x + p.B * policy.mean(x)
    if isinstance(policy, GaussianLinearPolicy):
        m, v = policy.mean(x), policy.variance
        acc = np.zeros_like(np.asarray(x, dtype=float))
        for w, xi in zip(_GH_WEIGHTS, _GH_NODES):
            acc = acc + w * env.drift(x, m + math.sqrt(2.0 * v) * xi)
        return acc
    raise ConfigError("batched aggregated drift requires a Gaussian policy")


def aggregated_sigma2_batch(env: EnvModel, policy, x):
    """Vectorized policy-averaged squared diffusion over a batch of 1-D states."""
    if env.family == "lq" and isinstance(policy, GaussianLinearPolicy):
        p = env.params
        m, v = policy.mean(x), policy.variance
        return (p.C * x + p.D * m) ** 2 + p.D**2 * v
    if isinstance(policy, GaussianLinearPolicy):
        m, v = policy.mean(x), policy.variance
        acc = np.zeros_like(np.asarray(x, dtype=float))
        for w, xi in zip(_GH_WEIGHTS, _GH_NODES):
            s = env.diffusion(x, m + math.sqrt(2.0 * v) * xi)
            acc = acc + w * np.square(s)
        return acc
    raise ConfigError("batched aggregated diffusion requires a Gaussian policy")
