import numpy as np
import pytest

from monoprox.problems import SaddleSpec, build_tightness_instance, build_two_piece_example, generate_saddle_instance

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def saddle():
    return generate_saddle_instance(SaddleSpec(seed=0))


@pytest.fixture(scope="session")
def small_saddle():
    return generate_saddle_instance(SaddleSpec(n=12, d_y=2, d_z=3, seed=5))


@pytest.fixture
def tight():
    return build_tightness_instance(1.0, [0.0], [1.0, -1.0])


@pytest.fixture
def two_piece():
    return build_two_piece_example()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
