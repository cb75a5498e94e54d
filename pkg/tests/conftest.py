import numpy as np
import pytest

from depthpose.cascade import CascadedPoseRegressor
from depthpose.depthcam import CameraModel, generate_dataset
from depthpose.skeleton import SkeletonModel


@pytest.fixture(scope="session")
def skeleton():
    return SkeletonModel.default()


@pytest.fixture(scope="session")
def camera():
    return CameraModel()


def random_poses(skeleton, n, seed=0, root=(0.0, 0.0, 3.0)):
    """In-limits random poses with the root near ``root``."""
    rng = np.random.default_rng(seed)
    q = np.zeros((n, 38))
    lo, hi = skeleton.joint_limits[3:].T
    q[:, 3:] = rng.uniform(lo, hi, size=(n, 35))
    q[:, :3] = np.asarray(root) + rng.uniform(-0.2, 0.2, size=(n, 3))
    return q


@pytest.fixture(scope="session")
def small_data(skeleton, camera):
    return generate_dataset(skeleton, camera, None, 40, seed=3)


@pytest.fixture(scope="session")
def small_test(skeleton, camera):
    return generate_dataset(skeleton, camera, None, 12, seed=3, start=5000)


@pytest.fixture(scope="session")
def small_model(skeleton, camera, small_data):
    return CascadedPoseRegressor(skeleton, camera, stage_counts=(2, 2, 2), n_trees=3, max_depth=6,
                                 n_descriptors=300, random_state=5).fit(small_data.images, small_data.truths)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(n, ok, detail):
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
