import numpy as np
import pytest

from rest3d.scenes import DatasetConfig, SceneConfig, generate_dataset, generate_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(3, SceneConfig(instances_min=3, instances_max=4, points_min=12, points_max=18))


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = DatasetConfig(
        scene=SceneConfig(instances_min=3, instances_max=5, points_min=15, points_max=30),
        n_scenes=12,
        samples_per_scene=4,
        n_val_scenes=4,
    )
    return generate_dataset(cfg, seed=5)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (ok, detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
