import time

import numpy as np
import pytest

from tsmantis.autograd import default_dtype
from tsmantis.data_io import make_synthetic
from tsmantis.model import MantisEncoder, get_config


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="module")
def tiny_encoder():
    return MantisEncoder(get_config("tiny"), seed=0)


@pytest.fixture
def tiny_encoder_f64():
    with default_dtype(np.float64):
        yield MantisEncoder(get_config("tiny"), seed=0)


@pytest.fixture(scope="module")
def two_cluster():
    return make_synthetic("two_cluster", 24, t=64, seed=0)


# acceptance criteria report: one line per criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}"
        line = f"[{status}] criterion {self.number}: {self.title} ({elapsed:.1f}s)"
        if detail:
            line += f" | {detail}"
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
