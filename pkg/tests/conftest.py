import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))

from gazekit.geometry import NormalizedBBox  # noqa: E402

# reproducible by default; HYPOTHESIS_PROFILE=explore for fresh random search
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.register_profile("explore", max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repro"))

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
points = st.tuples(unit, unit)
# coordinates on a 1e-6 lattice keep squared distances clear of float underflow
lattice = st.integers(0, 10**6).map(lambda k: k / 10**6)
lattice_points = st.tuples(lattice, lattice)


@st.composite
def boxes(draw, min_side=0.0):
    w = draw(st.floats(min_value=min_side, max_value=1.0))
    h = draw(st.floats(min_value=min_side, max_value=1.0))
    x = draw(st.floats(min_value=0.0, max_value=1.0 - w))
    y = draw(st.floats(min_value=0.0, max_value=1.0 - h))
    return NormalizedBBox(x, y, min(1.0, x + w), min(1.0, y + h))


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture
def golden_corpus():
    return DATA / "golden_corpus.jsonl"


@pytest.fixture
def golden_report():
    return DATA / "golden_report.jsonl"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
