import re

import numpy as np
import pytest
from hypothesis import strategies as st

from frp.geometry import BoundingBox

_CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str = "") -> None:
    _CRITERIA[number] = (passed, detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_runtest_logreport(report):
    # a criterion whose test errored or failed before recording still gets a line
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m and report.when == "call" and report.failed:
        n = int(m.group(1))
        passed, detail = _CRITERIA.get(n, (False, ""))
        _CRITERIA[n] = (False, detail or "assertion failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


coords = st.floats(min_value=-200.0, max_value=200.0, allow_nan=False, allow_infinity=False)
sizes = st.floats(min_value=0.01, max_value=150.0, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coords), draw(coords)
    w, h = draw(sizes), draw(sizes)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def random_box(rng, lo=0.0, hi=100.0, min_size=1.0, max_size=40.0) -> BoundingBox:
    w, h = rng.uniform(min_size, max_size, size=2)
    x1 = rng.uniform(lo, hi - w)
    y1 = rng.uniform(lo, hi - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


class TableScorer:
    """Scorer returning tabulated scores keyed by box coordinates."""

    def __init__(self, table: dict):
        self.table = table
        self.calls = 0

    def __call__(self, image, boxes_):
        self.calls += 1
        return np.array([self.table[b.as_tuple()] for b in boxes_], dtype=np.float64)


class ConstantScorer:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, image, boxes_):
        return np.full(len(boxes_), self.value)
