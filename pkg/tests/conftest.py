import numpy as np
import pytest

from aoi_nest.model import GroupSpec, ScenarioConfig, UserModel
from aoi_nest.scenario_io import base_scenario
from aoi_nest.statespace import TruncatedStateSpace


@pytest.fixture(scope="session")
def base_cfg() -> ScenarioConfig:
    return base_scenario()


@pytest.fixture(scope="session")
def small_base_cfg() -> ScenarioConfig:
    """Base group structure at a short horizon for fast episode tests."""
    return base_scenario(horizon=1500, truncation=400)


def tiny_config(
    tau: int = 2,
    p=(0.8,),
    num_users: int = 1,
    truncation: int = 60,
    horizon: int = 500,
    **kw,
) -> ScenarioConfig:
    return ScenarioConfig(
        num_users=num_users,
        num_servers=len(p),
        groups=(GroupSpec(num_users, tau, tuple(p)),),
        horizon=horizon,
        smoothing=50,
        truncation=truncation,
        rng_seed=kw.pop("rng_seed", 1234),
        **kw,
    )


def random_step_condition_instance(
    rng: np.random.Generator,
    max_servers: int = 2,
    delta_max: int = 25,
    tau_max: int = 4,
    nu_hi: float = 6.0,
):
    """Random user model whose adjacent probabilities satisfy p_m - p_{m-1} <= p_m^2."""
    m = int(rng.integers(1, max_servers + 1))
    while True:
        ps = np.sort(rng.uniform(0.25, 0.95, size=m))
        if np.all(np.diff(ps) <= ps[1:] ** 2):
            break
    tau = int(rng.integers(0, tau_max + 1))
    user = UserModel(tau, tuple(float(p) for p in ps))
    nu = rng.uniform(0.0, nu_hi, size=m)
    space = TruncatedStateSpace(delta_max)
    return user, nu, space
