import os

import numpy as np
import pytest

from zigpanel.ingest import Panel
from zigpanel.model import STREAMS

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

ACCEPTANCE = {}


def make_panel(y, X=None, stream="eth_sale", counts=None):
    """Panel with ``y`` as one stream and the other three streams zero."""
    y = np.asarray(y, dtype=float)
    m, n = y.shape
    streams = {s: (y if s == stream else np.zeros_like(y)) for s in STREAMS}
    if counts is None:
        counts = (y > 0).astype(np.int64)
    return Panel([f"w{i:03d}" for i in range(m)], n, streams, counts,
                 None if X is None else np.asarray(X, dtype=float), ("ethprice", "rf6m"), {})


@pytest.fixture
def fixture_dir():
    return FIXTURES


def report(criterion, ok, detail):
    """Record an acceptance outcome for the end-of-session summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in range(1, 10):
        ok, detail = ACCEPTANCE.get(key, (False, "not evaluated (error or deselected)"))
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
