from pathlib import Path

import pytest

from nlosvox import read_scene, simulate_dataset

SCENES = Path(__file__).resolve().parent.parent / "scenes"

# criterion number -> (passed, one-line detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion for the summary table."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)

    return record


@pytest.fixture(scope="session")
def scene_path():
    return lambda name: SCENES / f"{name}.toml"


@pytest.fixture(scope="session")
def two_patch():
    return simulate_dataset(read_scene(SCENES / "two_patch.toml"))


@pytest.fixture(scope="session")
def scaling_dataset():
    return simulate_dataset(read_scene(SCENES / "scaling.toml"))


@pytest.fixture(scope="session")
def point_scene():
    return read_scene(SCENES / "point.toml")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
