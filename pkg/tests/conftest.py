import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poseforge.shapecore import TriangleMesh, normalize

settings.register_profile(
    "poseforge", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("poseforge")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box_mesh(lo, hi):
    from poseforge.datagen import box, merge

    return merge([box(lo, hi)])


def cube_mesh(lo=-0.5, hi=0.5):
    return box_mesh([lo] * 3, [hi] * 3)


@pytest.fixture
def unit_cube():
    return cube_mesh()


@pytest.fixture
def asym_mesh():
    """Normalized cuboid with a marker block."""
    from poseforge.datagen import make_procedural_shapes

    return make_procedural_shapes(1, "cuboid", seed=5)[0]


def random_rotation(rng):
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()


def single_triangle():
    return normalize(TriangleMesh(np.array([[0.0, 0, 0], [1, 0.2, 0.1], [0.3, 1, -0.4]]),
                                  np.array([[0, 1, 2]])))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
