import sys

import numpy as np
import pytest
import torch

from erpnormal.sphere_geom import ErpGridSpec
from erpnormal.synthdata import make_dataset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight 16x32 scenes: 6 train, 1 val, 1 test."""
    root = tmp_path_factory.mktemp("tiny_data")
    make_dataset(8, seed=11, grid=ErpGridSpec.from_height(16), out_dir=root,
                 val_fraction=0.125, test_fraction=0.125)
    return root


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
