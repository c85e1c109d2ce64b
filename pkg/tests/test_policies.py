import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ctpo.nets import mlp_from_vector, mlp_to_vector
from ctpo.policies import (BetaMLPPolicy, GaussianLinearPolicy, OutOfSupportError,
                           aggregated_coefficients, gauss_entropy, kl_divergence,
                           kl_divergence_batch, regularizer_rate)
from ctpo.rng import substream
from ctpo.sde import EnvModel, make_ou_env

from conftest import assert_within_se


def uniform_beta_policy(ell=5.0):
    """Beta policy whose heads are pinned at alpha = beta = 1 (uniform)."""
    pol = BetaMLPPolicy((1, 4, 4, 2), ell=ell, rng=substream(0, "beta-uniform"))
    vec = pol.to_vector()
    w = mlp_from_vector(pol.sizes, vec)
    w3, b3 = w[-1]
    w3[:] = 0.0
    b3[:] = math.log(math.expm1(1.0 - 1e-3))  # softplus(b) + 1e-3 == 1
    return BetaMLPPolicy(pol.sizes, ell=ell, weights=w)


def random_beta_policy(seed, ell=5.0, features=None):
    return BetaMLPPolicy((1, 4, 4, 2), ell=ell, rng=substream(seed, "beta"),
                         features=features)


class TestSampling:
    def test_degenerate_gaussian(self):
        pol = GaussianLinearPolicy(0.0, 0.0, -80.0)
        a = pol.sample(3.0, substream(0, "s"))
        assert abs(a) < 1e-10

    def test_gaussian_sample_mean(self):
        pol = GaussianLinearPolicy(1.0, 0.5, 0.0)
        draws = pol.sample_batch(np.full(100_000, 2.0), substream(1, "s"))
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert_within_se(draws.mean(), 2.5, se, label="Gaussian sample mean")

    def test_uniform_beta_symmetry(self):
        pol = uniform_beta_policy()
        draws = pol.sample_batch(np.zeros(100_000), substream(2, "s"))
        assert np.all(np.abs(draws) < 5.0)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert_within_se(draws.mean(), 0.0, se, label="uniform Beta mean")

    def test_beta_support(self):
        pol = random_beta_policy(5)
        draws = pol.sample_batch(np.linspace(-1, 1, 10_000), substream(3, "s"))
        assert np.all(draws > -5.0) and np.all(draws < 5.0)


class TestLogDensity:
    def test_standard_normal_mode(self):
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        assert pol.log_density(17.3, 0.0 + pol.mean(17.3) - pol.mean(17.3) + 0.0) \
            == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert pol.log_density(0.0, 0.0) == pytest.approx(-0.918938533204672, abs=1e-12)

    def test_unit_shift(self):
        pol = GaussianLinearPolicy(1.0, 0.0, 0.0)
        assert pol.log_density(1.0, 2.0) == pytest.approx(
            -0.5 * math.log(2 * math.pi) - 0.5)

    def test_uniform_beta_density(self):
        pol = uniform_beta_policy(ell=5.0)
        for a in (-4.9, -1.0, 0.0, 3.7):
            assert pol.log_density(0.0, a) == pytest.approx(math.log(0.1), abs=1e-9)

    def test_out_of_support_sentinel(self):
        pol = random_beta_policy(1)
        assert pol.log_density(0.0, 5.0) == -math.inf
        assert pol.log_density(0.0, -7.0) == -math.inf
        with pytest.raises(OutOfSupportError):
            pol.score(0.0, 6.0)

    @pytest.mark.parametrize("policy,lo,hi", [
        (GaussianLinearPolicy(0.5, -0.2, -0.7), -9.0, 9.0),
        (GaussianLinearPolicy(0.0, 1.0, 0.4), -12.0, 14.0),
    ])
    def test_gaussian_normalization(self, policy, lo, hi):
        val, _ = quad(lambda a: math.exp(policy.log_density(0.7, a)), lo, hi)
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_beta_normalization(self):
        pol = random_beta_policy(9)
        val, _ = quad(lambda a: math.exp(pol.log_density(0.3, a)),
                      -5.0 + 1e-12, 5.0 - 1e-12)
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_batch_matches_scalar(self):
        pol = GaussianLinearPolicy(0.3, -0.2, -1.0)
        xs = np.array([-1.0, 0.0, 2.0])
        acts = np.array([0.1, -0.4, 0.9])
        batch = pol.log_density_batch(xs, acts)
        for i in range(3):
            assert batch[i] == pytest.approx(pol.log_density(xs[i], acts[i]), rel=1e-14)


class TestScore:
    def test_gaussian_score_at_mean(self):
        pol = GaussianLinearPolicy(0.7, -0.3, 0.3)
        m = pol.mean(2.0)
        assert np.allclose(pol.score(2.0, m), [0.0, 0.0, -0.5])

    def test_gaussian_score_hand_value(self):
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        assert np.allclose(pol.score(0.0, 1.0), [0.0, 1.0, 0.0])

    def test_gaussian_score_vs_finite_differences(self):
        rng = substream(4, "fd")
        h = 1e-6
        for _ in range(20):
            th = rng.uniform(-1, 1, 3)
            x, a = rng.uniform(-2, 2), rng.uniform(-2, 2)
            pol = GaussianLinearPolicy(*th)
            fd = np.empty(3)
            for j in range(3):
                tp, tm = th.copy(), th.copy()
                tp[j] += h
                tm[j] -= h
                fd[j] = (GaussianLinearPolicy(*tp).log_density(x, a)
                         - GaussianLinearPolicy(*tm).log_density(x, a)) / (2 * h)
            an = pol.score(x, a)
            assert np.all(np.abs(an - fd) <= 1e-5 * np.maximum(1.0, np.abs(an)))

    def test_beta_score_vs_finite_differences(self):
        rng = substream(5, "fd")
        h = 1e-6
        for probe in range(10):
            pol = random_beta_policy(100 + probe)
            vec = pol.to_vector()
            x = rng.uniform(-1, 1)
            a = pol.sample(x, rng)
            an = pol.score(x, a)
            fd = np.empty_like(vec)
            for j in range(vec.size):
                vp, vm = vec.copy(), vec.copy()
                vp[j] += h
                vm[j] -= h
                fd[j] = (pol.with_vector(vp).log_density(x, a)
                         - pol.with_vector(vm).log_density(x, a)) / (2 * h)
            assert np.all(np.abs(an - fd) <= 1e-5 * np.maximum(1.0, np.abs(an)))

    def test_score_identity_gaussian(self):
        pol = GaussianLinearPolicy(0.4, -0.1, -0.6)
        x = 1.3
        acts = pol.sample_batch(np.full(100_000, x), substream(6, "si"))
        scores = pol.score_batch(np.full_like(acts, x), acts)
        for j in range(3):
            se = scores[j].std(ddof=1) / math.sqrt(acts.size)
            assert_within_se(scores[j].mean(), 0.0, se, label=f"score identity [{j}]")

    def test_score_identity_beta(self):
        pol = random_beta_policy(7)
        x = 0.4
        n = 100_000
        acts = pol.sample_batch(np.full(n, x), substream(8, "si"))
        total = np.zeros(pol.n_params)
        total_sq = np.zeros(pol.n_params)
        for chunk in np.array_split(np.arange(n), 50):
            s = pol.score_weighted_sum(np.full(chunk.size, x), acts[chunk],
                                       np.ones(chunk.size))
            total += s
        # estimate the per-sample spread from per-chunk means
        chunk_means = []
        for chunk in np.array_split(np.arange(n), 50):
            chunk_means.append(pol.score_weighted_sum(
                np.full(chunk.size, x), acts[chunk], np.ones(chunk.size)) / chunk.size)
        chunk_means = np.array(chunk_means)
        mean = total / n
        se = chunk_means.std(axis=0, ddof=1) / math.sqrt(len(chunk_means))
        assert np.all(np.abs(mean) <= 3 * se + 1e-3)

    def test_weighted_sum_matches_individual_scores(self):
        pol = random_beta_policy(11)
        xs = np.array([-0.5, 0.2, 1.0])
        acts = np.array([1.0, -2.0, 0.3])
        w = np.array([0.5, -1.5, 2.0])
        combined = pol.score_weighted_sum(xs, acts, w)
        manual = sum(w[i] * pol.score(xs[i], acts[i]) for i in range(3))
        assert np.allclose(combined, manual, rtol=1e-10)


class TestKL:
    def test_self_kl_exactly_zero(self):
        pol = GaussianLinearPolicy(0.3, 0.1, -0.4)
        assert kl_divergence(pol, pol, 1.7) == 0.0
        bp = random_beta_policy(3)
        assert kl_divergence(bp, bp, 0.2) == 0.0

    def test_unit_mean_shift(self):
        p = GaussianLinearPolicy(0.0, 0.0, 0.0)
        q = GaussianLinearPolicy(0.0, 1.0, 0.0)
        assert kl_divergence(p, q, 0.0) == pytest.approx(0.5)

    def test_beta_kl_vs_quadrature(self):
        # Beta(2, 2) against Beta(1, 1), KL via numeric quadrature on (0, 1)
        def logf(u, a, b):
            from scipy.special import betaln
            return (a - 1) * math.log(u) + (b - 1) * math.log1p(-u) - betaln(a, b)

        target, _ = quad(lambda u: math.exp(logf(u, 2, 2))
                         * (logf(u, 2, 2) - logf(u, 1, 1)), 1e-12, 1 - 1e-12)
        from ctpo.policies import _beta_kl
        assert _beta_kl(2.0, 2.0, 1.0, 1.0) == pytest.approx(target, abs=1e-6)

    def test_mixed_families_rejected(self):
        with pytest.raises(TypeError):
            kl_divergence(GaussianLinearPolicy(0, 0, 0), random_beta_policy(0), 0.0)

    @given(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 2)),
           st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 2)),
           st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_kl_nonnegative(self, th1, th2, x):
        p = GaussianLinearPolicy(*th1)
        q = GaussianLinearPolicy(*th2)
        assert kl_divergence(p, q, x) >= 0.0

    def test_batch_matches_scalar(self):
        p = GaussianLinearPolicy(0.1, -0.2, -0.5)
        q = GaussianLinearPolicy(-0.3, 0.4, 0.2)
        xs = np.array([-1.0, 0.5, 2.0])
        batch = kl_divergence_batch(p, q, xs)
        for i, x in enumerate(xs):
            assert batch[i] == pytest.approx(kl_divergence(p, q, x), rel=1e-12)


class TestRegularizerRate:
    def test_none_kind(self):
        env = make_ou_env()
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        assert regularizer_rate(env, pol, 1.0, 2.0) == 0.0

    def test_entropy_kind_hand_value(self, lq_env):
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        assert regularizer_rate(lq_env, pol, 0.0, 0.0) == pytest.approx(
            0.918938533204672, abs=1e-12)

    def test_expected_rate_is_differential_entropy(self, lq_env):
        pol = GaussianLinearPolicy(0.5, -0.3, -1.2)
        x = 0.8
        acts = pol.sample_batch(np.full(100_000, x), substream(9, "h"))
        rates = -pol.log_density_batch(np.full_like(acts, x), acts)
        se = rates.std(ddof=1) / math.sqrt(acts.size)
        assert_within_se(rates.mean(), gauss_entropy(pol.variance), se,
                         label="entropy rate")


class TestAggregatedCoefficients:
    def test_action_free_diffusion(self):
        env = make_ou_env(rate=1.0, vol=0.7)
        b, s2 = aggregated_coefficients(env, GaussianLinearPolicy(0.3, 0.5, 0.0), 1.2)
        assert s2[0, 0] == pytest.approx(0.49, rel=1e-12)
        assert b[0] == pytest.approx(-1.2, rel=1e-12)

    def test_lq_closed_form(self, lq_env):
        pol = GaussianLinearPolicy(0.2, 0.4, -0.8)
        x = 1.5
        m, v = pol.mean(x), pol.variance
        b, s2 = aggregated_coefficients(lq_env, pol, x)
        assert b[0] == pytest.approx(-x)
        assert s2[0, 0] == pytest.approx(m * m + v, rel=1e-12)

    def test_standard_normal_policy_at_origin(self, lq_env):
        b, s2 = aggregated_coefficients(lq_env, GaussianLinearPolicy(0, 0, 0), 0.0)
        assert b[0] == pytest.approx(0.0, abs=1e-15)
        assert s2[0, 0] == pytest.approx(1.0, rel=1e-12)

    def test_hermite_path_matches_quadrature(self):
        env = EnvModel(state_dim=1, noise_dim=1,
                       drift=lambda x, a: np.tanh(a) - 0.1 * x,
                       diffusion=lambda x, a: 1.0 + 0.0 * a,
                       reward=lambda x, a: 0.0 * x)
        pol = GaussianLinearPolicy(0.0, 0.4, -0.5)
        b, _ = aggregated_coefficients(env, pol, 2.0)
        target, _ = quad(lambda a: math.tanh(a) * math.exp(pol.log_density(2.0, a)),
                         -12, 12)
        assert b[0] == pytest.approx(target - 0.2, abs=1e-7)

    def test_monte_carlo_path_for_beta(self):
        env = make_ou_env(vol=0.3)  # constant diffusion: exact under MC
        pol = random_beta_policy(13)
        b, s2 = aggregated_coefficients(env, pol, 0.5,
                                        rng=substream(0, "mc"), mc_samples=2000)
        assert s2[0, 0] == pytest.approx(0.09, rel=1e-12)
        assert b[0] == pytest.approx(-0.5, rel=1e-12)

    def test_monte_carlo_nonconvergence_reported(self):
        from ctpo.policies import QuadratureError

        env = EnvModel(state_dim=1, noise_dim=1,
                       drift=lambda x, a: 100.0 * a + 0.0 * x,
                       diffusion=lambda x, a: 1.0 + 0.0 * a,
                       reward=lambda x, a: 0.0 * x,
                       action_low=-5.0, action_high=5.0)
        pol = random_beta_policy(14)
        with pytest.raises(QuadratureError) as err:
            aggregated_coefficients(env, pol, 0.0, mc_samples=20, mc_rtol=1e-4,
                                    rng=substream(1, "mc"))
        assert err.value.estimate is not None
        assert err.value.tolerance is not None


class TestParameterVector:
    def test_gaussian_roundtrip(self):
        pol = GaussianLinearPolicy(0.1, -0.2, 0.3)
        again = pol.with_vector(pol.to_vector())
        assert again == pol
        assert pol.n_params == 3

    def test_beta_roundtrip(self):
        pol = random_beta_policy(21)
        vec = pol.to_vector()
        again = pol.with_vector(vec)
        assert np.array_equal(again.to_vector(), vec)
        assert mlp_to_vector(mlp_from_vector(pol.sizes, vec)).shape == vec.shape
        x, a = 0.3, 1.1
        assert again.log_density(x, a) == pol.log_density(x, a)
