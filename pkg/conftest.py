import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from data.simulator import SimConfig, sample_observations, simulate_path  # noqa: E402
from sdde.model import ParameterBinding, TwoDelay  # noqa: E402

# the three reference parameter sets (a, b) with r = sigma = 1
REFERENCE_THETAS = [(-1.0, 0.95), (-1.0, -0.1353), (-1.0, -2.1)]


@pytest.fixture(params=REFERENCE_THETAS, ids=["upper", "middle", "lower"])
def reference_model(request) -> TwoDelay:
    a, b = request.param
    return TwoDelay(a=a, b=b, r=1.0, sigma=1.0)


@pytest.fixture
def middle_model() -> TwoDelay:
    return TwoDelay(a=-1.0, b=-0.1353, r=1.0, sigma=1.0)


@pytest.fixture
def ab_binding() -> ParameterBinding:
    return ParameterBinding.of("a", "b")


@pytest.fixture
def b_binding() -> ParameterBinding:
    return ParameterBinding.of("b")


@pytest.fixture(scope="session")
def middle_series():
    """n = 200 observations at delta = 1 from the middle reference model."""
    model = TwoDelay(a=-1.0, b=-0.1353, r=1.0, sigma=1.0)
    path = simulate_path(SimConfig(model=model, step=0.01, horizon=200.0, seed=7))
    return sample_observations(path, 1.0, 200)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
