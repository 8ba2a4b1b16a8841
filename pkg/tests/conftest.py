import numpy as np
import pytest

from depthcal.geometry import CameraIntrinsics
from depthcal.simulator import SimConfig, camera_mount, random_wall_planes, simulate_sequence, smooth_bias_field

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{name:<26} {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=50.0, fy=50.0, cx=15.5, cy=11.5, width=32, height=24)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_sequence(K, seed=3, count=40, noise=(0.0007, 0.0, 0.002), field_seed=5, **field_kwargs):
    ext = camera_mount()
    truth = smooth_bias_field(K, field_seed, **field_kwargs)
    config = SimConfig(K, random_wall_planes(ext, seed, count), ext, noise, seed=seed)
    return simulate_sequence(config, truth), ext, truth
