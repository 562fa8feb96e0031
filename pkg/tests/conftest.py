from pathlib import Path

import numpy as np
import pytest

from ciuav.synth import SceneConfig, generate_dataset, grid_plan

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """27 samples: 3x3 grid at 3 heights, one frame per point."""
    scene = SceneConfig()
    return generate_dataset(scene, grid_plan(scene, nx=3, ny=3, frames_per_point=1))


@pytest.fixture(scope="session")
def default_dataset():
    scene = SceneConfig()
    return generate_dataset(scene, grid_plan(scene))


# one verdict line per acceptance criterion, reported at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
