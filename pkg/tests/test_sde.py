import math

import numpy as np
import pytest

from ctpo.occupation import simulate_grid_states
from ctpo.policies import GaussianLinearPolicy
from ctpo.rng import substream
from ctpo.sde import (BoundedEnvParams, ConfigError, EnvModel, LQParams,
                      PairTradingParams, PolicyEnvMismatchError, RolloutDivergedError,
                      euler_step, make_bounded_env, make_lq_env, make_ou_env,
                      make_pair_trading_env, n_grid_steps, rollout)

from conftest import assert_within_se


def _const_env(b=0.0, s=0.0, r=0.0):
    return EnvModel(state_dim=1, noise_dim=1,
                    drift=lambda x, a: b + 0.0 * x,
                    diffusion=lambda x, a: s + 0.0 * x,
                    reward=lambda x, a: r + 0.0 * x)


class TestEulerStep:
    def test_zero_coefficients_identity(self):
        assert euler_step(_const_env(), 1.0, 0.0, 0.005, 0.3) == 1.0

    def test_deterministic_decay(self):
        env = EnvModel(state_dim=1, noise_dim=1, drift=lambda x, a: -x,
                       diffusion=lambda x, a: 0.0 * x, reward=lambda x, a: 0.0 * x)
        assert euler_step(env, 1.0, 0.0, 0.005, 1.7) == pytest.approx(0.995, abs=1e-15)

    def test_lq_hand_value(self):
        env = make_lq_env(LQParams())
        got = euler_step(env, 2.0, 0.5, 0.005, 1.0)
        expected = 2.0 - 2.0 * 0.005 + 0.5 * 1.0 * math.sqrt(0.005)
        assert got == pytest.approx(expected, rel=1e-14)
        assert got == pytest.approx(2.025355, abs=1e-6)

    def test_nonfinite_raises(self):
        env = _const_env(b=1e308)
        with pytest.raises(RolloutDivergedError):
            euler_step(env, 1e308, 0.0, 1.0, 0.0)

    def test_bad_dt(self):
        with pytest.raises(ConfigError):
            euler_step(_const_env(), 0.0, 0.0, 0.0, 0.0)


class TestRollout:
    def test_length_arithmetic(self, lq_env):
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        traj = rollout(lq_env, pol, 0.0, 0.01, 0.005, substream(0, "len"))
        assert traj.n_steps == 2
        assert len(traj.states) == len(traj.actions) == len(traj.rewards) == 2
        assert traj.n_steps * traj.dt == pytest.approx(0.01)

    def test_grid_exactness_enforced(self, lq_env):
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        with pytest.raises(ConfigError):
            rollout(lq_env, pol, 0.0, 25.0, 0.007, substream(0, "g"))
        assert n_grid_steps(25.0, 0.004) == 6250

    def test_same_seed_bit_identical(self, lq_env):
        pol = GaussianLinearPolicy(0.3, -0.1, -0.5)
        t1 = rollout(lq_env, pol, 0.0, 1.0, 0.005, substream(7, "det"))
        t2 = rollout(lq_env, pol, 0.0, 1.0, 0.005, substream(7, "det"))
        for name in ("states", "actions", "rewards", "reg_values"):
            assert np.array_equal(getattr(t1, name), getattr(t2, name))

    def test_degenerate_policy_tracks_deterministic_recursion(self):
        # variance -> 0 Gaussian at mean 0; with B = 0 drift ignores actions
        env = make_lq_env(LQParams())
        pol = GaussianLinearPolicy(0.0, 0.0, -60.0)
        traj = rollout(env, pol, 1.0, 0.5, 0.005, substream(1, "deg"))
        expected = (1.0 - 0.005) ** np.arange(traj.n_steps)
        assert np.allclose(traj.states, expected, atol=1e-9)

    def test_regularizer_matches_log_density(self, lq_env):
        pol = GaussianLinearPolicy(0.2, 0.1, -1.0)
        traj = rollout(lq_env, pol, 0.0, 0.25, 0.005, substream(3, "reg"))
        manual = np.array([-pol.log_density(x, a)
                           for x, a in zip(traj.states, traj.actions)])
        assert np.array_equal(traj.reg_values, manual)

    def test_no_regularizer_recorded_as_zero(self):
        env = make_ou_env()
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        traj = rollout(env, pol, 0.0, 0.1, 0.005, substream(2, "r0"))
        assert np.all(traj.reg_values == 0.0)

    def test_action_space_mismatch(self):
        env = EnvModel(state_dim=1, noise_dim=1, drift=lambda x, a: 0.0 * x,
                       diffusion=lambda x, a: 1.0 + 0.0 * x,
                       reward=lambda x, a: 0.0 * x,
                       action_low=-1e-4, action_high=1e-4)
        pol = GaussianLinearPolicy(0.0, 0.0, 0.0)
        with pytest.raises(PolicyEnvMismatchError):
            rollout(env, pol, 0.0, 0.1, 0.005, substream(0, "mis"))

    def test_divergence_carries_step_index(self):
        env = EnvModel(state_dim=1, noise_dim=1, drift=lambda x, a: x * x * x,
                       diffusion=lambda x, a: 0.0 * x, reward=lambda x, a: 0.0 * x)
        pol = GaussianLinearPolicy(0.0, 0.0, -60.0)
        with pytest.raises(RolloutDivergedError) as err:
            rollout(env, pol, 3.0, 5.0, 0.1, substream(0, "dvg"))
        assert err.value.step is not None

    def test_nonfinite_reward_diverges(self):
        # reward log1p(W) is undefined once the state crosses -1
        env = EnvModel(state_dim=1, noise_dim=1, drift=lambda x, a: -10.0 + 0.0 * x,
                       diffusion=lambda x, a: 0.0 * x,
                       reward=lambda x, a: np.log1p(x))
        pol = GaussianLinearPolicy(0.0, 0.0, -60.0)
        with pytest.raises(RolloutDivergedError):
            rollout(env, pol, 0.0, 1.0, 0.005, substream(0, "wlt"))


class TestWeakConvergence:
    def test_ou_terminal_moments(self):
        # dX = -X dt + dB from x0 = 1: mean e^{-T}, variance (1 - e^{-2T}) / 2
        env = make_ou_env()
        T, dt, n = 1.0, 0.005, 20000
        finals = [s[-1] for s in simulate_grid_states(env, None, 1.0, T + dt, dt, n,
                                                      substream(11, "ou"), chunk=5000)]
        xs = np.concatenate(finals)
        m_se = xs.std(ddof=1) / math.sqrt(n)
        assert_within_se(xs.mean(), math.exp(-T), m_se, label="OU mean")
        v_hat = xs.var(ddof=1)
        v_se = math.sqrt(2.0 / (n - 1)) * v_hat
        assert_within_se(v_hat, (1 - math.exp(-2 * T)) / 2, v_se, label="OU variance")


class TestEnvConstructors:
    def test_lq_reward_origin(self, lq_env):
        assert lq_env.reward(0.0, 0.0) == 0.0

    def test_lq_reward_hand_value(self, lq_env):
        # M = N = Q = 2, R = P = 1 at x = a = 1
        assert lq_env.reward(1.0, 1.0) == pytest.approx(-6.0, abs=1e-14)

    def test_lq_paper_coefficients(self, lq_env):
        assert lq_env.drift(3.0, 5.0) == pytest.approx(-3.0)
        assert lq_env.diffusion(3.0, 5.0) == pytest.approx(5.0)
        assert lq_env.regularizer_kind == "entropy"

    @pytest.mark.parametrize("kwargs,fragment", [
        (dict(N_cost=0.0), "N_cost"),
        (dict(M_cost=-1.0), "M_cost"),
        (dict(R=3.0), "R^2"),
        (dict(beta=-3.0), "admissibility"),
    ])
    def test_lq_invariants_named(self, kwargs, fragment):
        with pytest.raises(ConfigError, match=fragment.replace("^", "\\^")):
            LQParams(**kwargs)

    def test_pairs_mean_reversion_fixed_point(self):
        p = PairTradingParams()
        env = make_pair_trading_env(p)
        drift = env.drift(np.array([p.theta_mean, 1.0]), 0.0)
        assert drift[0] == pytest.approx(0.0, abs=1e-15)

    def test_pairs_spread_drift_hand_value(self):
        p = PairTradingParams(k=0.01, theta_mean=7.0)
        env = make_pair_trading_env(p)
        drift = env.drift(np.array([5.0, 1.0]), 0.0)
        assert drift[0] == pytest.approx(0.02, abs=1e-15)

    def test_pairs_wealth_diffuses_even_at_zero_position(self):
        # the wealth noise term carries no position factor (modeled as written)
        p = PairTradingParams()
        env = make_pair_trading_env(p)
        sig = env.diffusion(np.array([p.theta_mean, 1.0]), 0.0)
        assert sig[1] == pytest.approx(p.eta * 1.0)
        drift = env.drift(np.array([p.theta_mean, 1.0]), 0.0)
        assert drift[1] == 0.0

    def test_pairs_invariants(self):
        with pytest.raises(ConfigError):
            PairTradingParams(eta=0.0)
        with pytest.raises(ConfigError):
            PairTradingParams(w0=-1.0)
        with pytest.raises(ConfigError):
            BoundedEnvParams(noise=0.0)

    def test_pairs_shared_noise_column(self):
        p = PairTradingParams()
        env = make_pair_trading_env(p)
        assert env.noise_dim == 1
        assert env.action_low == -p.ell and env.action_high == p.ell

    def test_bounded_env_coefficients(self):
        env = make_bounded_env(BoundedEnvParams(pull=0.05, noise=0.2))
        assert env.drift(2.0, 0.0) == pytest.approx(-0.1)
        assert env.diffusion(13.0, 4.0) == pytest.approx(0.2)
