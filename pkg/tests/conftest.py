import pytest

from ctpo.lq import solve_lq
from ctpo.sde import LQParams, make_lq_env


@pytest.fixture(scope="session")
def lq_params():
    return LQParams()


@pytest.fixture(scope="session")
def lq_env(lq_params):
    return make_lq_env(lq_params)


@pytest.fixture(scope="session")
def lq_solution(lq_params):
    return solve_lq(lq_params)


def assert_within_se(value, target, se, n_se=3.0, floor=1e-12, label=""):
    """Assert |value - target| <= n_se * se (with a tiny absolute floor)."""
    gap = abs(value - target)
    assert gap <= n_se * se + floor, (
        f"{label}: |{value} - {target}| = {gap} > {n_se} * {se}"
    )
