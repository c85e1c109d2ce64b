"""Discounted occupation-time sampling and Monte Carlo verification machinery.

The discounted occupation measure of a policy weights states by
integral_0^inf e^{-beta s} p(x, s) ds (total mass 1/beta). Its normalized
version is sampled by drawing an Exponential(beta) time tau, rounding down
to the grid, and reading the state there, which is how both training
algorithms and every estimator below reach states distributed as beta * d.

Estimators implemented here:

- `occupation_histogram` / `discounted_functional`: the occupation-time
  identity E int e^{-beta s} phi(X_s) ds = <d, phi> checked from both sides.
- `performance_difference_mc`: the identity eta(pi_hat) - eta(pi) =
  E_{x ~ beta d^{pi_hat}, a ~ pi_hat} [q(x, a; pi) + gamma p(x, a, pi_hat)] / beta,
  both sides estimated independently.
- `surrogate_objective`: the same integral reweighted onto the current
  policy's occupation measure via importance ratios, the local
  approximation maximized by the proximal algorithm.
- `coupled_rollout` / `coupled_second_moment` / `gronwall_check`: two
  aggregated-coefficient SDEs driven by the same Brownian increments; their
  squared gap obeys E|X_t - Y_t|^2 <= C(pi, pi_hat)/C_bs (e^{C_bs t} - 1)
  with C_bs = 2 C_b + 1 + 2 C_sigma^2, which the check verifies against the
  empirical moment curve.

Rollout times beyond T - 2 dt are rejected and redrawn: the advantage-rate
estimator needs the successor state, and the truncation bias is below
e^{-beta T} (about 1e-11 at beta = 1, T = 25).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .policies import aggregated_drift_batch, aggregated_sigma2_batch
from .sde import ConfigError, EnvModel, RolloutDivergedError, Trajectory, n_grid_steps

__all__ = [
    "RolloutTime",
    "OccupationEstimate",
    "CoupledPair",
    "OccupationSamples",
    "PerfDiffResult",
    "GronwallReport",
    "sample_rollout_time",
    "sample_rollout_indices",
    "occupation_histogram",
    "discounted_functional",
    "discounted_return_batch",
    "simulate_grid_states",
    "occupation_state_samples",
    "performance_difference_mc",
    "surrogate_objective",
    "coupled_rollout",
    "coupled_second_moment",
    "gronwall_check",
]

_MAX_REJECTION_DRAWS = 10**6


@dataclass(frozen=True)
class RolloutTime:
    """An Exponential(beta) draw rounded down to the sampling grid."""

    tau_raw: float
    tau_grid: float
    index: int


@dataclass
class OccupationEstimate:
    """Histogram estimate of the discounted occupation measure (1-D state)."""

    bin_edges: np.ndarray
    masses: np.ndarray
    underflow: float
    overflow: float
    n_trajectories: int

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum() + self.underflow + self.overflow)


@dataclass
class CoupledPair:
    """Two aggregated-dynamics trajectories driven by identical noise."""

    dt: float
    n_steps: int
    times: np.ndarray
    states_x: np.ndarray
    states_y: np.ndarray


@dataclass
class OccupationSamples:
    """On-policy tuples (X_tau, a_tau, q_hat, p_hat) from rollout-time draws."""

    states: np.ndarray
    actions: np.ndarray
    q_hat: np.ndarray
    p_hat: np.ndarray

    def __len__(self) -> int:
        return self.actions.size


@dataclass
class PerfDiffResult:
    """Both sides of the performance-difference identity, with standard errors."""

    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    def gap_in_se(self) -> float:
        return abs(self.lhs - self.rhs) / math.sqrt(self.lhs_se**2 + self.rhs_se**2)


@dataclass
class GronwallReport:
    """Outcome of the coupled-moment bound check."""

    applicable: bool
    passed: Optional[bool]
    envelope: Optional[np.ndarray]
    n_violations: int = 0
    max_excess: float = 0.0


def sample_rollout_time(beta: float, dt: float, T: float, rng: np.random.Generator) -> RolloutTime:
    """Draw tau ~ Exponential(beta), floored to the grid; redraw past T - 2 dt."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    N = n_grid_steps(T, dt)
    for _ in range(_MAX_REJECTION_DRAWS):
        tau = rng.exponential(1.0 / beta)
        index = int(tau / dt)
        if index <= N - 2:
            return RolloutTime(tau_raw=tau, tau_grid=index * dt, index=index)
    raise ConfigError(
        f"rollout-time rejection loop exceeded {_MAX_REJECTION_DRAWS} draws; "
        f"horizon T={T} is far too small for beta={beta}"
    )


def sample_rollout_indices(beta: float, dt: float, T: float, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Vectorized grid indices of n accepted rollout-time draws."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    N = n_grid_steps(T, dt)
    out = np.empty(n, dtype=np.int64)
    filled = 0
    drawn = 0
    while filled < n:
        m = max(1024, n - filled)
        drawn += m
        if drawn > max(_MAX_REJECTION_DRAWS, 64 * n):
            raise ConfigError(f"rollout-time rejection loop exceeded {drawn} draws")
        idx = (rng.exponential(1.0 / beta, size=m) / dt).astype(np.int64)
        idx = idx[idx <= N - 2]
        take = min(idx.size, n - filled)
        out[filled : filled + take] = idx[:take]
        filled += take
    return out


def _states_matrix(traj_or_states) -> np.ndarray:
    if isinstance(traj_or_states, Trajectory):
        s = traj_or_states.states
        if s.ndim != 1:
            raise ConfigError("occupation histogram expects 1-D states")
        return s[:, None]
    return np.asarray(traj_or_states)


def occupation_histogram(trajectories, beta: float, bin_edges) -> OccupationEstimate:
    """Discounted occupation-measure histogram from a set of trajectories.

    Each visited grid point contributes weight e^{-beta t_i} dt / n_traj to
    the bin containing X_{t_i}; states outside the window accumulate in the
    reported under/overflow masses. Accepts `Trajectory` objects or raw
    (n_steps, batch) state matrices on a common grid (pass the grid via the
    leading trajectory when mixing is needed, mixing grids is an error).
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ConfigError("bin_edges must be a 1-D array of at least two edges")
    items = list(trajectories) if isinstance(trajectories, Iterable) else [trajectories]
    if not items:
        raise ConfigError("no trajectories supplied")
    dt = items[0].dt if isinstance(items[0], Trajectory) else items[0][1]
    masses = np.zeros(edges.size - 1)
    under = over = 0.0
    n_traj = 0
    n_steps_ref = None
    for item in items:
        if isinstance(item, Trajectory):
            states, dt_i = _states_matrix(item), item.dt
        else:
            states, dt_i = np.asarray(item[0]), item[1]
        if dt_i != dt:
            raise ConfigError("all trajectories must share the same grid")
        if n_steps_ref is None:
            n_steps_ref = states.shape[0]
        elif states.shape[0] != n_steps_ref:
            raise ConfigError("all trajectories must share the same grid")
        w = np.exp(-beta * dt * np.arange(states.shape[0])) * dt
        wmat = np.broadcast_to(w[:, None], states.shape)
        pos = np.searchsorted(edges, states.ravel(), side="right") - 1
        wflat = wmat.ravel()
        inside = (pos >= 0) & (pos < masses.size) & (states.ravel() < edges[-1])
        at_top = states.ravel() == edges[-1]
        masses += np.bincount(pos[inside], weights=wflat[inside], minlength=masses.size)
        masses[-1] += wflat[at_top].sum()
        under += wflat[states.ravel() < edges[0]].sum()
        over += wflat[(states.ravel() > edges[-1])].sum()
        n_traj += states.shape[1]
    masses /= n_traj
    return OccupationEstimate(bin_edges=edges, masses=masses, underflow=under / n_traj,
                              overflow=over / n_traj, n_trajectories=n_traj)


def simulate_grid_states(env: EnvModel, policy, x0, T: float, dt: float, n_traj: int,
                         rng: np.random.Generator, chunk: int = 2048):
    """Yield (n_steps, chunk) state matrices of independent rollouts (1-D envs).

    ``policy=None`` drives the dynamics with the zero action (for
    action-free test processes).
    """
    if env.state_dim != 1:
        raise ConfigError("grid-state simulation supports 1-D environments")
    N = n_grid_steps(T, dt)
    sqrt_dt = math.sqrt(dt)
    done = 0
    while done < n_traj:
        b = min(chunk, n_traj - done)
        states = np.empty((N, b))
        x = np.full(b, float(x0))
        for i in range(N):
            states[i] = x
            a = np.zeros(b) if policy is None else policy.sample_batch(x, rng)
            z = rng.standard_normal(b)
            x = x + env.drift(x, a) * dt + env.diffusion(x, a) * (z * sqrt_dt)
        if not np.all(np.isfinite(x)):
            raise RolloutDivergedError("non-finite state in batched simulation")
        yield states
        done += b


def discounted_functional(env: EnvModel, policy, phi: Callable, beta: float, T: float,
                          dt: float, n_traj: int, rng: np.random.Generator,
                          x0: float = 0.0, chunk: int = 2048):
    """Monte Carlo estimate of E int_0^T e^{-beta s} phi(X_s) ds, with SE.

    The integral is the grid sum sum_i e^{-beta t_i} phi(X_{t_i}) dt per
    trajectory, averaged over independent rollouts.
    """
    N = n_grid_steps(T, dt)
    w = np.exp(-beta * dt * np.arange(N)) * dt
    total = 0.0
    total_sq = 0.0
    count = 0
    for states in simulate_grid_states(env, policy, x0, T, dt, n_traj, rng, chunk):
        vals = w @ phi(states)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        count += vals.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0) * count / max(count - 1, 1)
    return float(mean), float(math.sqrt(var / count))


def histogram_functional(env: EnvModel, policy, x0, phi: Callable, beta: float, T: float,
                         dt: float, n_traj: int, rng: np.random.Generator, bin_edges,
                         chunk: int = 2048):
    """<occupation histogram, phi> with a per-trajectory standard error.

    Each trajectory contributes sum_i e^{-beta t_i} dt phi(c(X_{t_i})) with
    c(.) the center of the containing bin; averaging these reproduces the
    inner product of the occupation histogram with phi evaluated at bin
    centers (mass outside the window is dropped, as in the histogram), and
    their spread gives the Monte Carlo standard error.
    """
    edges = np.asarray(bin_edges, dtype=float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    phi_c = np.asarray(phi(centers), dtype=float)
    total = 0.0
    total_sq = 0.0
    count = 0
    for states in simulate_grid_states(env, policy, x0, T, dt, n_traj, rng, chunk):
        w = np.exp(-beta * dt * np.arange(states.shape[0])) * dt
        pos = np.searchsorted(edges, states, side="right") - 1
        pos[states == edges[-1]] = centers.size - 1
        inside = (pos >= 0) & (pos < centers.size)
        contrib = np.where(inside, phi_c[np.clip(pos, 0, centers.size - 1)], 0.0)
        vals = w @ contrib
        total += vals.sum()
        total_sq += (vals * vals).sum()
        count += vals.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0) * count / max(count - 1, 1)
    return float(mean), float(math.sqrt(var / count))


def discounted_return_batch(env: EnvModel, policy, x0, T: float, dt: float, n: int,
                            rng: np.random.Generator, beta: float, gamma: float = 0.0):
    """Per-trajectory discounted returns sum_i e^{-beta t_i} (r_i + gamma p_i) dt.

    Vectorized over ``n`` independent rollouts; diverged trajectories come
    back as NaN. States are (B,) for 1-D environments, (n_dim, B) otherwise.
    """
    N = n_grid_steps(T, dt)
    sqrt_dt = math.sqrt(dt)
    entropy = env.regularizer_kind == "entropy"
    x0a = np.asarray(x0, dtype=float)
    if env.state_dim == 1:
        x = np.full(n, float(x0a))
    else:
        x = np.repeat(x0a.reshape(env.state_dim, 1), n, axis=1)
    acc = np.zeros(n)
    disc = 1.0
    decay = math.exp(-beta * dt)
    with np.errstate(all="ignore"):
        for i in range(N):
            a = policy.sample_batch(x, rng)
            rate = env.reward(x, a)
            if entropy and gamma != 0.0:
                rate = rate - gamma * policy.log_density_batch(x, a)
            acc += disc * rate * dt
            disc *= decay
            z = rng.standard_normal(n)
            x = x + env.drift(x, a) * dt + env.diffusion(x, a) * (z * sqrt_dt)
    if env.state_dim == 1:
        bad = ~np.isfinite(x)
    else:
        bad = ~np.all(np.isfinite(x), axis=0)
    acc[bad | ~np.isfinite(acc)] = np.nan
    return acc


def occupation_state_samples(env: EnvModel, policy, x0, beta: float, T: float, dt: float,
                             n: int, rng: np.random.Generator):
    """n on-policy draws (X_tau, a_tau) with tau ~ Exponential(beta) on the grid.

    Trajectories are simulated only up to their own rollout time: targets
    are sorted descending and the active batch shrinks as draws mature, so
    the cost is proportional to the sum of the sampled times. 1-D
    environments only.
    """
    if env.state_dim != 1:
        raise ConfigError("occupation-state sampling supports 1-D environments")
    idx = sample_rollout_indices(beta, dt, T, n, rng)
    order = np.argsort(-idx, kind="stable")
    idx_sorted = idx[order]
    neg = -idx_sorted  # ascending, for searchsorted
    sqrt_dt = math.sqrt(dt)
    states_out = np.empty(n)
    actions_out = np.empty(n)
    x = np.full(n, float(x0))
    hi = n
    i = 0
    while hi > 0:
        a = policy.sample_batch(x[:hi], rng)
        lo = int(np.searchsorted(neg, -i, side="left"))
        if lo < hi:  # rows whose rollout time is this grid point
            states_out[lo:hi] = x[lo:hi]
            actions_out[lo:hi] = a[lo:hi]
        z = rng.standard_normal(lo)
        if lo > 0:
            xa = x[:lo]
            aa = a[:lo]
            x[:lo] = xa + env.drift(xa, aa) * dt + env.diffusion(xa, aa) * (z * sqrt_dt)
        hi = lo
        i += 1
    if not np.all(np.isfinite(states_out)):
        raise RolloutDivergedError("non-finite state in occupation sampling")
    return states_out, actions_out, idx_sorted


def performance_difference_mc(env: EnvModel, pi_hat, pi, q_fn: Callable, beta: float,
                              gamma: float, T: float, dt: float, rng: np.random.Generator,
                              x0: float = 0.0, n_lhs: int = 4000,
                              n_rhs: int = 20000) -> PerfDiffResult:
    """Estimate both sides of the performance-difference identity.

    lhs: eta(pi_hat) - eta(pi) by paired common-random-number Monte Carlo of
    the discounted returns. rhs: sample x ~ beta d^{pi_hat} via rollout
    times, a ~ pi_hat(.|x), and average (q(x, a; pi) + gamma p(x, a, pi_hat))
    / beta, where q is supplied by an exact q-provider for pi.
    """
    seed = int(rng.integers(2**62))
    ret_hat = discounted_return_batch(env, pi_hat, x0, T, dt, n_lhs,
                                      np.random.default_rng(seed), beta, gamma)
    ret_base = discounted_return_batch(env, pi, x0, T, dt, n_lhs,
                                       np.random.default_rng(seed), beta, gamma)
    diff = ret_hat - ret_base
    diff = diff[np.isfinite(diff)]
    lhs = float(diff.mean())
    lhs_se = float(diff.std(ddof=1) / math.sqrt(diff.size))

    xs, acts, _ = occupation_state_samples(env, pi_hat, x0, beta, T, dt, n_rhs, rng)
    vals = q_fn(xs, acts)
    if env.regularizer_kind == "entropy" and gamma != 0.0:
        vals = vals + gamma * (-pi_hat.log_density_batch(xs, acts))
    vals = vals / beta
    rhs = float(vals.mean())
    rhs_se = float(vals.std(ddof=1) / math.sqrt(vals.size))
    return PerfDiffResult(lhs=lhs, lhs_se=lhs_se, rhs=rhs, rhs_se=rhs_se)


def sample_state_columns(states: np.ndarray) -> np.ndarray:
    """Row-per-sample state array as batch columns (vector states transpose)."""
    return states if states.ndim == 1 else states.T


def surrogate_objective(pi_new, pi_old, samples: OccupationSamples, gamma: float,
                        beta: float, regularizer: str = "entropy") -> float:
    """Importance-weighted local approximation of the performance metric.

    (1/beta) * mean_j [pi_new(a_j|x_j) / pi_old(a_j|x_j)] *
    (q_hat_j + gamma * p(x_j, a_j, pi_new)); the additive eta(pi_old)
    constant is dropped since it does not affect the maximizer. Samples
    whose old-policy density underflows are skipped and counted; a warning
    fires if more than 1% are dropped.
    """
    cols = sample_state_columns(samples.states)
    logp_new = pi_new.log_density_batch(cols, samples.actions)
    logp_old = pi_old.log_density_batch(cols, samples.actions)
    log_ratio = logp_new - logp_old
    keep = np.isfinite(log_ratio) & (log_ratio < 700.0)
    n_skipped = int((~keep).sum())
    if n_skipped > 0.01 * len(samples):
        warnings.warn(
            f"surrogate objective skipped {n_skipped}/{len(samples)} samples "
            "with degenerate importance ratios",
            RuntimeWarning,
        )
    ratio = np.exp(log_ratio[keep])
    inner = samples.q_hat[keep]
    if regularizer == "entropy" and gamma != 0.0:
        inner = inner + gamma * (-logp_new[keep])
    return float(np.mean(ratio * inner) / beta)


def _aggregated_sigma_batch(env, policy, x):
    return np.sqrt(aggregated_sigma2_batch(env, policy, x))


def coupled_rollout(env: EnvModel, pi, pi_hat, x0, T: float, dt: float,
                    rng: np.random.Generator) -> CoupledPair:
    """Two aggregated-coefficient trajectories driven by the same increments.

    X evolves under the policy-averaged drift and diffusion of ``pi``, Y
    under those of ``pi_hat``, both from x0 with one shared Gaussian stream.
    """
    if env.state_dim != 1:
        raise ConfigError("coupled rollouts support 1-D environments")
    N = n_grid_steps(T, dt)
    sqrt_dt = math.sqrt(dt)
    times = np.arange(N + 1) * dt
    xs = np.empty(N + 1)
    ys = np.empty(N + 1)
    xs[0] = ys[0] = float(x0)
    z = rng.standard_normal(N)
    xv = np.array([float(x0)])
    yv = np.array([float(x0)])
    for i in range(N):
        bx = aggregated_drift_batch(env, pi, xv)
        by = aggregated_drift_batch(env, pi_hat, yv)
        sx = _aggregated_sigma_batch(env, pi, xv)
        sy = _aggregated_sigma_batch(env, pi_hat, yv)
        xv = xv + bx * dt + sx * (z[i] * sqrt_dt)
        yv = yv + by * dt + sy * (z[i] * sqrt_dt)
        xs[i + 1] = xv[0]
        ys[i + 1] = yv[0]
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise RolloutDivergedError("non-finite state in coupled rollout")
    return CoupledPair(dt=dt, n_steps=N, times=times, states_x=xs, states_y=ys)


def coupled_second_moment(env: EnvModel, pi, pi_hat, x0, T: float, dt: float,
                          n_pairs: int, rng: np.random.Generator):
    """Empirical E|X_t - Y_t|^2 curve over coupled pairs, with SEs.

    Returns (times, mean_sq, se) on the full grid including t = 0.
    """
    if env.state_dim != 1:
        raise ConfigError("coupled rollouts support 1-D environments")
    N = n_grid_steps(T, dt)
    sqrt_dt = math.sqrt(dt)
    x = np.full(n_pairs, float(x0))
    y = np.full(n_pairs, float(x0))
    msq = np.zeros(N + 1)
    se = np.zeros(N + 1)
    for i in range(N):
        z = rng.standard_normal(n_pairs) * sqrt_dt
        x = x + aggregated_drift_batch(env, pi, x) * dt + _aggregated_sigma_batch(env, pi, x) * z
        y = (y + aggregated_drift_batch(env, pi_hat, y) * dt
             + _aggregated_sigma_batch(env, pi_hat, y) * z)
        gap2 = (x - y) ** 2
        msq[i + 1] = gap2.mean()
        se[i + 1] = gap2.std(ddof=1) / math.sqrt(n_pairs) if n_pairs > 1 else 0.0
    return np.arange(N + 1) * dt, msq, se


def gronwall_check(times, mean_sq, se, C_b: Optional[float], C_sigma: Optional[float],
                   C_pi: Optional[float]) -> GronwallReport:
    """Check the empirical coupled moment curve against its exponential envelope.

    The envelope is C_pi / C_bs * (e^{C_bs t} - 1) with
    C_bs = 2 C_b + 1 + 2 C_sigma^2; the curve must sit below it at every
    grid time, within 3 Monte Carlo standard errors. Unknown constants give
    a not-applicable report (the bound is a verification feature, not a
    runtime guard).
    """
    if C_b is None or C_sigma is None or C_pi is None:
        return GronwallReport(applicable=False, passed=None, envelope=None)
    t = np.asarray(times, dtype=float)
    curve = np.asarray(mean_sq, dtype=float)
    errs = np.zeros_like(curve) if se is None else np.asarray(se, dtype=float)
    c_bs = 2.0 * C_b + 1.0 + 2.0 * C_sigma**2
    envelope = C_pi / c_bs * (np.exp(c_bs * t) - 1.0)
    excess = curve - (envelope + 3.0 * errs)
    violations = int((excess > 0).sum())
    return GronwallReport(applicable=True, passed=violations == 0, envelope=envelope,
                          n_violations=violations,
                          max_excess=float(excess.max()) if excess.size else 0.0)
