import numpy as np
import pytest

from heatpose.model import Pose, SkeletonSpec, coco_skeleton

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


@pytest.fixture
def coco():
    return coco_skeleton()


@pytest.fixture
def toy3():
    return SkeletonSpec("toy3", ["a", "b", "c"], [0.05, 0.1, 0.2], [(0, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_pose(xy, score=1.0, area=10000.0, image_id=0, vis=2, kp_score=1.0):
    xy = np.asarray(xy, dtype=float)
    k = xy.shape[0]
    return Pose(
        xy=xy,
        scores=np.full(k, kp_score),
        visibility=np.full(k, vis),
        instance_score=score,
        area=area,
        image_id=image_id,
    )


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
