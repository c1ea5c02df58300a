import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from touchloc import shapes
from touchloc.geometry import Pose, quat_to_matrix
from touchloc.grid import GridSpec, build_grid
from touchloc.render import SensorModel
from touchloc.similarity import Encoder, encode_grid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@st.composite
def rotations(draw):
    q = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return quat_to_matrix(q / np.linalg.norm(q))


@st.composite
def poses(draw, scale=20.0):
    t = [draw(st.floats(-scale, scale)) for _ in range(3)]
    return Pose(draw(rotations()), t)


@pytest.fixture(scope="session")
def small_sensor():
    """The default sensor at 64 x 64: cheap enough for per-test grids."""
    return SensorModel.default().scaled(64)


@pytest.fixture(scope="session")
def bracket_mesh():
    return shapes.bracket()


@pytest.fixture(scope="session")
def small_spec():
    return GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0), x_step=1.0, y_step=1.0, n_view_dirs=1, n_rolls=8)


@pytest.fixture(scope="session")
def small_grid(bracket_mesh, small_sensor, small_spec):
    return build_grid(bracket_mesh, small_sensor, small_spec)


@pytest.fixture(scope="session")
def baseline():
    return Encoder.baseline()


@pytest.fixture(scope="session")
def encoded_grid(small_grid, baseline):
    return encode_grid(baseline, small_grid)
