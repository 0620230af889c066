import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hnsurv.data import SplitAssignment, generate_synthetic, load_arrays, load_cohort  # noqa: E402
from hnsurv.training import TrainConfig  # noqa: E402

SMALL = dict(widths=(4, 8), depths=(1, 1), embedding=8, intervals=4)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


def all_train(arrays):
    return SplitAssignment({sid: "train" for sid in arrays.ids})


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """20 synthetic subjects at 16^3 on disk, with their loaded arrays."""
    out = tmp_path_factory.mktemp("tiny")
    c = generate_synthetic(out, 20, (16, 16, 16), signal=4.0, censor_rate=0.3, seed=11)
    records = load_cohort(c.manifest)
    return c, records, load_arrays(records, ("ct", "pet"), None, np.float64)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
