import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report
    if acceptance_report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.lines():
            terminalreporter.write_line(line)
