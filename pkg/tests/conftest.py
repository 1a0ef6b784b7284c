import numpy as np
import pytest

from helpers import BOX_CAMERAS, BOX_SCENE, small_camera
from vfnerf.dataset import CameraSet, generate_dataset, load_cameras, load_dataset, load_scene


@pytest.fixture(scope="session")
def box_scene():
    return load_scene(BOX_SCENE)


@pytest.fixture(scope="session")
def box_cameras():
    return load_cameras(BOX_CAMERAS)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, box_scene):
    """Two 8x8 training views and one held-out view of the box room."""
    cams = tuple(small_camera(8, 8, (0.0, 0.0, 1.5), t) for t in ((1.0, 0.2, 1.0), (-1.0, 0.5, 1.2)))
    holdout = (small_camera(8, 8, (0.2, 0.1, 1.4), (0.0, -1.0, 1.0)),)
    out = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(box_scene, CameraSet(cams, holdout), out, seed=0)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one PASS/FAIL line per criterion, shown after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def record(number: int, passed: bool, text: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {text}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
