import numpy as np
import pytest

from trajlab import diffusion, world
from trajlab.autodiff import MlpSpec, ParamSet, init_mlp_params


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def lead_world():
    """Ego at 12 m/s with a slow lead 15 m ahead in lane."""
    return world.WorldState(
        lane_width=3.6, ego_speed=12.0,
        agents=[world.Agent(15.0, 0.0, 4.0, 0.0, "vehicle")],
        intersection_distance=None)


@pytest.fixture
def empty_world():
    return world.WorldState(lane_width=3.6, ego_speed=10.0, agents=[],
                            intersection_distance=None)


def make_scenario(w, style="normal", seed=0, sid="t0"):
    srng = np.random.default_rng(seed)
    return world.Scenario(
        id=sid, world=w, gt=world.style_rollout(w, style, rng=srng),
        style=style, obs=world.featurize(w))


@pytest.fixture
def tiny_policy(rng):
    """Small untrained policy for mechanics tests."""
    schedule = diffusion.build_schedule(4, 1e-3, 0.2)
    return diffusion.new_policy(schedule, rng, hidden=(24, 24))


def small_params(seed=0, widths=(3, 8, 2), activation="relu") -> tuple:
    spec = MlpSpec(widths, activation)
    return init_mlp_params(spec, np.random.default_rng(seed)), spec
