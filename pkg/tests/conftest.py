import numpy as np
import pytest

from lidarvote import synth
from lidarvote.pointcloud import DensePointCloud, Pose
from lidarvote.viewgen import CameraIntrinsics

_CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record():
    """Log one acceptance line, then assert it."""

    def _record(name, ok, detail=""):
        _CRITERIA.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _record


@pytest.fixture
def small_intr():
    return CameraIntrinsics.from_fov(64, 48, 90.0)


@pytest.fixture
def small_scene():
    """The default street with a sparse ray pattern and 6 poses."""
    return synth.default_scene(
        0,
        n_beams=8,
        n_azimuth=90,
        trajectory=synth.straight_trajectory(20.0, 6, 1.8),
    )


def make_cloud(positions, intensity=None, gt=None, class_names=("a", "b", "c")):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if intensity is None:
        intensity = np.linspace(0, 1, len(positions)) if len(positions) > 1 else np.zeros(len(positions))
    return DensePointCloud(
        positions=positions,
        intensity_norm=intensity,
        source_scan=np.zeros(len(positions), dtype=int),
        gt_class=gt,
        class_names=class_names,
    )


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng, scale=10.0):
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, 3))
