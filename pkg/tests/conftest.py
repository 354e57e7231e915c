import sys

import numpy as np
import pytest

from lmnet.data import synth_shapes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twenty 32x32 synthetic images with masks and a manifest."""
    root = tmp_path_factory.mktemp("shapes")
    return synth_shapes(20, 32, seed=3, out=root)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    lines = [line for name, mod in sys.modules.items() if name.endswith("test_acceptance")
             for line in getattr(mod, "RESULTS", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
