import math
import types

import numpy as np
import pytest

from ctpo.critic import QuadraticCritic
from ctpo.harness import mc_performance
from ctpo.lq import (analytic_q, analytic_q_fn, hj_residual, hj_residual_coefficients,
                     kl_to_optimal, optimal_policy, solve_lq, solve_policy_value)
from ctpo.occupation import occupation_state_samples
from ctpo.policies import GaussianLinearPolicy
from ctpo.rng import substream
from ctpo.sde import ConfigError, LQParams

from conftest import assert_within_se

GH_NODES, GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)
GH_WEIGHTS = GH_WEIGHTS / math.sqrt(math.pi)


class TestSolveLQ:
    def test_reference_parameter_set(self, lq_solution):
        assert lq_solution.k0 == pytest.approx(0.71914874, abs=1e-6)
        assert lq_solution.k1 == pytest.approx(-0.10555128, abs=1e-6)
        assert lq_solution.k2 == pytest.approx(-0.53518376, abs=1e-6)
        assert lq_solution.mean_slope == pytest.approx(-0.39444872, abs=1e-6)
        assert lq_solution.mean_intercept == pytest.approx(-0.78889745, abs=1e-6)
        assert lq_solution.variance == pytest.approx(
            0.1 / (2.0 - lq_solution.k2), rel=1e-12)

    def test_zero_linear_terms(self):
        sol = solve_lq(LQParams(R=0.0, P=0.0, Q=0.0))
        assert sol.k1 == 0.0
        assert sol.mean_intercept == 0.0

    def test_smaller_root_selected(self, lq_params, lq_solution):
        # k2 solves a quadratic; the other root would violate N - k2 D^2 > 0
        # when substituted with the plus branch, or give a larger k2
        lam = lq_params.beta - (2 * lq_params.A + lq_params.C**2)
        den = (lq_params.B + lq_params.C * lq_params.D) ** 2 + lam * lq_params.D**2
        num = (lam * lq_params.N_cost
               + 2 * (lq_params.B + lq_params.C * lq_params.D) * lq_params.R
               - lq_params.D**2 * lq_params.M_cost)
        disc = num**2 - 4 * den * (lq_params.R**2 - lq_params.M_cost * lq_params.N_cost)
        other = 0.5 * (num + math.sqrt(disc)) / den
        assert lq_solution.k2 < other

    def test_inadmissible_discount_raises(self):
        with pytest.raises(ConfigError):
            LQParams(beta=-2.0)

    def test_degenerate_action_channel(self):
        with pytest.raises(ConfigError):
            solve_lq(LQParams(B=0.0, C=0.0, D=0.0))


class TestAnalyticQ:
    def test_boltzmann_identity(self, lq_params, lq_solution):
        """E_{a ~ pi*}[q(x, a) - gamma log pi*(a|x)] = 0 at every state.

        The optimal policy is the normalized Boltzmann density of q / gamma,
        so the identity holds pointwise; checked by Gauss-Hermite quadrature.
        """
        pi = optimal_policy(lq_solution)
        for x in (-2.0, -0.5, 0.0, 1.0, 2.0):
            m, v = pi.mean(x), pi.variance
            nodes = m + math.sqrt(2 * v) * GH_NODES
            q = analytic_q(lq_solution, lq_params, x, nodes)
            logp = np.array([pi.log_density(x, a) for a in nodes])
            val = GH_WEIGHTS @ (q + lq_params.gamma * (-logp))
            assert abs(val) < 1e-8

    def test_argmax_is_policy_mean(self, lq_params, lq_solution):
        pi = optimal_policy(lq_solution)
        for x in (-1.5, 0.0, 0.8):
            q0 = analytic_q(lq_solution, lq_params, x, 0.0)
            qp = analytic_q(lq_solution, lq_params, x, 1.0)
            qm = analytic_q(lq_solution, lq_params, x, -1.0)
            c2 = 0.5 * (qp + qm) - q0
            c1 = 0.5 * (qp - qm)
            assert -c1 / (2 * c2) == pytest.approx(pi.mean(x), rel=1e-9)

    def test_degenerate_zero_formula(self):
        blank = types.SimpleNamespace(A=0.0, B=0.0, C=0.0, D=0.0, M_cost=0.0,
                                      N_cost=0.0, R=0.0, P=0.0, Q=0.0, beta=1.0)
        q = analytic_q_fn(blank, QuadraticCritic(0.0, 0.0, 0.0))
        for x, a in ((0.0, 0.0), (2.0, -1.0), (-3.0, 4.0)):
            assert q(x, a) == 0.0


class TestHJResidual:
    def test_zero_at_optimum(self, lq_params, lq_solution):
        crit = lq_solution.critic()
        pi = optimal_policy(lq_solution)
        for x in (-2.0, -1.0, 0.0, 1.0, 2.0):
            assert abs(hj_residual(crit, pi, lq_params, x)) < 1e-9

    def test_coefficients_zero_at_optimum(self, lq_params, lq_solution):
        coeffs = hj_residual_coefficients(lq_solution.critic(),
                                          optimal_policy(lq_solution), lq_params)
        assert all(abs(c) < 1e-9 for c in coeffs)

    def test_hand_value_zero_critic(self, lq_params):
        got = hj_residual(QuadraticCritic(0, 0, 0), GaussianLinearPolicy(0, 0, 0),
                          lq_params, 0.0)
        expected = 1.0 - 0.1 * 0.5 * math.log(2 * math.pi * math.e)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.858106, abs=1e-6)

    def test_reward_scaling_linearity(self, lq_params):
        crit = QuadraticCritic(0.3, -0.1, 0.2)
        pol = GaussianLinearPolicy(0.2, -0.5, -0.3)
        doubled = LQParams(M_cost=4.0, N_cost=4.0, R=2.0, P=2.0, Q=4.0)
        x = 1.3
        m, v = pol.mean(x), pol.variance
        r_tilde = -(0.5 * 2 * x * x + 1 * x * m + 0.5 * 2 * (m * m + v) + 1 * x + 2 * m)
        diff = (hj_residual(crit, pol, doubled, x)
                - hj_residual(crit, pol, lq_params, x))
        assert diff == pytest.approx(-r_tilde, rel=1e-12)


class TestFixedPolicyValue:
    def test_reduces_to_optimal_constants(self, lq_params, lq_solution):
        vp = solve_policy_value(lq_params, optimal_policy(lq_solution))
        assert vp.phi0 == pytest.approx(lq_solution.k0, abs=1e-12)
        assert vp.phi1 == pytest.approx(lq_solution.k1, abs=1e-12)
        assert vp.phi2 == pytest.approx(lq_solution.k2, abs=1e-12)

    def test_solves_hj_identity(self, lq_params):
        pol = GaussianLinearPolicy(-0.2, -0.9, -0.8)
        vp = solve_policy_value(lq_params, pol)
        coeffs = hj_residual_coefficients(vp, pol, lq_params)
        assert all(abs(c) < 1e-12 for c in coeffs)

    def test_unstable_policy_rejected(self, lq_params):
        with pytest.raises(ConfigError):
            solve_policy_value(lq_params, GaussianLinearPolicy(2.0, 0.0, 0.0))

    def test_local_optimality_of_closed_form(self, lq_params, lq_solution):
        # 100 random unit perturbations at radius 0.05 never beat the optimum
        theta_star = np.array([lq_solution.mean_slope, lq_solution.mean_intercept,
                               lq_solution.theta3])
        eta_star = solve_policy_value(lq_params,
                                      GaussianLinearPolicy(*theta_star)).phi0
        rng = substream(0, "perturb")
        for _ in range(100):
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            pert = theta_star + 0.05 * u
            eta = solve_policy_value(lq_params, GaussianLinearPolicy(*pert)).phi0
            assert eta <= eta_star + 1e-12

    def test_monte_carlo_performance_agrees(self, lq_env, lq_params):
        pol = GaussianLinearPolicy(-0.35, -0.7, -1.8)
        eta_exact = solve_policy_value(lq_params, pol).value(0.0)
        eta_hat, se = mc_performance(lq_env, pol, 1.0, 25.0, 0.005, 600,
                                     substream(3, "mc"), lq_params.gamma, 0.0)
        assert_within_se(eta_hat, eta_exact, se, label="eta via Monte Carlo")


class TestKLToOptimal:
    def test_zero_at_optimum(self, lq_solution):
        assert kl_to_optimal(optimal_policy(lq_solution), lq_solution,
                             np.linspace(-2, 2, 11)) == 0.0

    def test_constant_mean_shift(self, lq_solution):
        # equal variances: KL is the squared mean shift over twice the variance,
        # identical at every state, in either argument order
        shift = 0.2
        pi = optimal_policy(lq_solution)
        shifted = GaussianLinearPolicy(pi.theta1, pi.theta2 + shift, pi.theta3)
        expected = shift**2 / (2 * lq_solution.variance)
        got = kl_to_optimal(shifted, lq_solution, np.linspace(-3, 3, 17))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_performance_gap_identity(self, lq_env, lq_params, lq_solution):
        """eta(pi) - eta(pi*) = -gamma E_{x ~ beta d}[KL(pi* || pi)].

        Both sides evaluated independently: the left by Monte Carlo return
        against the closed-form optimum, the right by the KL metric over
        occupation-time state samples.
        """
        pol = GaussianLinearPolicy(-0.5, -0.6, -2.0)
        eta_hat, se = mc_performance(lq_env, pol, 1.0, 25.0, 0.005, 1500,
                                     substream(4, "gap"), lq_params.gamma, 0.0)
        states, _, _ = occupation_state_samples(lq_env, pol, 0.0, 1.0, 25.0, 0.005,
                                                4000, substream(5, "gap"))
        kl = kl_to_optimal(pol, lq_solution, states)
        lhs = eta_hat - lq_solution.critic().value(0.0)
        assert_within_se(lhs, -lq_params.gamma * kl, 3 * se,
                         label="KL-to-optimum equivalence")
