import sys

import pytest
import torch

from camalkit.datasets import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(samples_per_class=8, seed=5))


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    return torch.Generator().manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
