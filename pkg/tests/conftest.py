import numpy as np
import pytest

from featalign.geometry import Camera, Pose, so3_exp
from featalign.scene import SceneSpec, generate

SMALL_CAMERA = Camera(100.0, 100.0, 63.5, 63.5, 128, 128)


def small_spec(**kw):
    """A 128 px, 60-point scene with thin feature channels; fast to solve."""
    base = dict(n_points=60, dims=(16, 16, 8), camera=SMALL_CAMERA)
    base.update(kw)
    return SceneSpec(**base)


def random_pose(rng, max_angle=np.pi - 1e-3, t_scale=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, max_angle) / np.linalg.norm(w)
    return Pose(so3_exp(w), rng.normal(scale=t_scale, size=3))


@pytest.fixture(scope="session")
def standard_scene():
    return generate(SceneSpec(seed=0))


@pytest.fixture(scope="session")
def small_scene():
    return generate(small_spec(seed=0))


@pytest.fixture(scope="session")
def small_changed_scene():
    return generate(small_spec(seed=0, appearance_change=0.5))


@pytest.fixture(scope="session")
def quadratic_scene():
    return generate(small_spec(seed=1, field_type="quadratic-basin"))


@pytest.fixture(scope="session")
def bimodal_scene():
    return generate(SceneSpec(seed=0, field_type="bimodal", dims=(8, 8, 4)))


# --- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` logs one pass/fail line for criterion ``n``."""
    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
