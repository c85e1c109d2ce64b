"""Closed-form ground truth for the scalar linear-quadratic environment.

For drift A x + B a, diffusion C x + D a, reward
-(M/2 x^2 + R x a + N/2 a^2 + P x + Q a), discount beta and entropy
temperature gamma, the optimal value function is quadratic,
V*(x) = k2 x^2 / 2 + k1 x + k0, and the optimal feedback policy is Gaussian
with a state-linear mean and constant variance gamma / (N - k2 D^2). The
constants solve the stationary Hamilton-Jacobi equation; k2 is the smaller
root of its defining quadratic (the minus branch).

The module also solves the fixed-policy value function for any Gaussian
linear policy (quadratic again, by matching polynomial coefficients in the
Hamilton-Jacobi identity), which yields analytic advantage rates
q(x, a; pi) for arbitrary policies of that family, not just the optimum.

On the parameterization of the optimal variance: exp(theta3) is read as the
variance, so the optimal theta3 equals log(gamma / (N - k2 D^2)). The
optimal mean coefficients are used as convergence targets directly; policy
distance is otherwise measured by the KL divergence to the optimum, which
is proportional to the performance gap for this environment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .critic import QuadraticCritic
from .policies import GaussianLinearPolicy, gauss_entropy, kl_divergence_batch
from .sde import ConfigError, LQParams

__all__ = [
    "LQSolution",
    "solve_lq",
    "optimal_policy",
    "solve_policy_value",
    "analytic_q",
    "analytic_q_fn",
    "hj_residual",
    "hj_residual_coefficients",
    "kl_to_optimal",
]


@dataclass(frozen=True)
class LQSolution:
    """Optimal value constants and optimal-policy parameters."""

    k0: float
    k1: float
    k2: float
    mean_slope: float
    mean_intercept: float
    variance: float

    @property
    def theta3(self) -> float:
        """Optimal theta3 under the exp(theta3) = variance reading."""
        return math.log(self.variance)

    def critic(self) -> QuadraticCritic:
        return QuadraticCritic(self.k0, self.k1, self.k2)


def solve_lq(p: LQParams) -> LQSolution:
    """Evaluate the closed-form optimal constants for the LQ environment."""
    A, B, C, D = p.A, p.B, p.C, p.D
    M, N, R, Q, P = p.M_cost, p.N_cost, p.R, p.Q, p.P
    beta, gamma = p.beta, p.gamma
    lam = beta - (2.0 * A + C * C)
    den = (B + C * D) ** 2 + lam * D * D
    if den <= 0:
        raise ConfigError(f"degenerate action channel: (B+CD)^2 + (beta-2A-C^2) D^2 = {den}")
    num = lam * N + 2.0 * (B + C * D) * R - D * D * M
    disc = num * num - 4.0 * den * (R * R - M * N)
    if disc < 0:
        raise ConfigError(f"negative discriminant {disc}: discount rate inadmissible")
    k2 = 0.5 * (num - math.sqrt(disc)) / den
    nk = N - k2 * D * D
    if nk <= 0:
        raise ConfigError(f"N - k2 D^2 = {nk} <= 0: solution degenerate")
    k1 = (P * nk - Q * R) / (k2 * B * (B + C * D) + (A - beta) * nk - B * R)
    k0 = (k1 * B - Q) ** 2 / (2.0 * beta * nk) + gamma / (2.0 * beta) * (
        math.log(2.0 * math.pi * math.e * gamma / nk) - 1.0
    )
    return LQSolution(
        k0=k0,
        k1=k1,
        k2=k2,
        mean_slope=(k2 * (B + C * D) - R) / nk,
        mean_intercept=(k1 * B - Q) / nk,
        variance=gamma / nk,
    )


def optimal_policy(sol: LQSolution) -> GaussianLinearPolicy:
    return GaussianLinearPolicy(sol.mean_slope, sol.mean_intercept, sol.theta3)


def solve_policy_value(p: LQParams, policy: GaussianLinearPolicy) -> QuadraticCritic:
    """Value function of a *fixed* Gaussian linear policy, V = v2 x^2/2 + v1 x + v0.

    Obtained by matching the x^2, x, 1 coefficients of the stationary
    Hamilton-Jacobi identity for the aggregated dynamics. Requires the
    policy-induced dynamics to be stable under the discount,
    beta > 2 (A + B theta1) + (C + D theta1)^2.
    """
    t1, t2, v = policy.theta1, policy.theta2, policy.variance
    A1 = p.A + p.B * t1
    A0 = p.B * t2
    S1 = p.C + p.D * t1
    S0 = p.D * t2
    M, N, R, Q, P = p.M_cost, p.N_cost, p.R, p.Q, p.P
    denom = p.beta - 2.0 * A1 - S1 * S1
    if denom <= 0:
        raise ConfigError(
            f"fixed-policy value undefined: beta - 2(A+B theta1) - (C+D theta1)^2 = {denom} <= 0"
        )
    v2 = -(M + 2.0 * R * t1 + N * t1 * t1) / denom
    v1 = (A0 * v2 + S1 * S0 * v2 - (R * t2 + N * t1 * t2 + P + Q * t1)) / (p.beta - A1)
    v0 = (
        A0 * v1
        + 0.5 * (S0 * S0 + p.D * p.D * v) * v2
        - (0.5 * N * (t2 * t2 + v) + Q * t2)
        + p.gamma * gauss_entropy(v)
    ) / p.beta
    return QuadraticCritic(v0, v1, v2)


def analytic_q_fn(p: LQParams, value: QuadraticCritic) -> Callable:
    """Advantage rate x, a -> b V' + sigma^2 V''/2 + r - beta V for a quadratic V.

    Vectorized over arrays of states and actions.
    """
    v0, v1, v2 = value.phi0, value.phi1, value.phi2
    A, B, C, D = p.A, p.B, p.C, p.D
    M, N, R, Q, P = p.M_cost, p.N_cost, p.R, p.Q, p.P
    beta = p.beta

    def q(x, a):
        vprime = v2 * x + v1
        reward = -(0.5 * M * x * x + R * x * a + 0.5 * N * a * a + P * x + Q * a)
        return (
            (A * x + B * a) * vprime
            + 0.5 * (C * x + D * a) ** 2 * v2
            + reward
            - beta * (0.5 * v2 * x * x + v1 * x + v0)
        )

    return q


def analytic_q(sol: LQSolution, p: LQParams, x, a):
    """Advantage rate of the optimal policy, from the closed-form constants."""
    return analytic_q_fn(p, sol.critic())(x, a)


def hj_residual_coefficients(critic: QuadraticCritic, policy: GaussianLinearPolicy,
                             p: LQParams) -> tuple[float, float, float]:
    """(c0, c1, c2) of the Hamilton-Jacobi residual polynomial in x.

    residual(x) = beta V - b~ V' - sigma~^2 V''/2 - r~ - gamma p~, with the
    Gaussian closed forms for the policy-averaged reward and entropy.
    """
    t1, t2, v = policy.theta1, policy.theta2, policy.variance
    f0, f1, f2 = critic.phi0, critic.phi1, critic.phi2
    A1 = p.A + p.B * t1
    A0 = p.B * t2
    S1 = p.C + p.D * t1
    S0 = p.D * t2
    M, N, R, Q, P = p.M_cost, p.N_cost, p.R, p.Q, p.P
    c2 = 0.5 * p.beta * f2 - A1 * f2 - 0.5 * S1 * S1 * f2 + (0.5 * M + R * t1 + 0.5 * N * t1 * t1)
    c1 = p.beta * f1 - (A1 * f1 + A0 * f2) - S1 * S0 * f2 + (R * t2 + N * t1 * t2 + P + Q * t1)
    c0 = (
        p.beta * f0
        - A0 * f1
        - 0.5 * (S0 * S0 + p.D * p.D * v) * f2
        + (0.5 * N * (t2 * t2 + v) + Q * t2)
        - p.gamma * gauss_entropy(v)
    )
    return c0, c1, c2


def hj_residual(critic: QuadraticCritic, policy: GaussianLinearPolicy, p: LQParams, x) -> float:
    """Hamilton-Jacobi residual at one state (zero for the exact pair)."""
    c0, c1, c2 = hj_residual_coefficients(critic, policy, p)
    return c2 * x * x + c1 * x + c0


def kl_to_optimal(policy: GaussianLinearPolicy, sol: LQSolution, states) -> float:
    """Mean KL(pi(.|x) || pi*(.|x)) over occupation-measure state samples.

    With the optimal policy the Boltzmann density of q / gamma, the
    performance-difference identity collapses to

        eta(pi) - eta(pi*) = -gamma E_{x ~ beta d^pi} KL(pi(.|x) || pi*(.|x)),

    (the integrand is averaged under the evaluated policy), so this mean is
    exactly the performance gap divided by -gamma and serves as the
    distance-to-optimality metric.
    """
    pi_star = optimal_policy(sol)
    return float(np.mean(kl_divergence_batch(policy, pi_star, np.asarray(states))))
