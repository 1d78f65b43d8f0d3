import copy

import pytest
import torch

from encoderlock.expcli.datasets import toy_handle
from encoderlock.training import pretrain_encoder

# acceptance outcomes, filled by test_acceptance.py: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_domains():
    sizes = {"train": 600, "test": 300}
    return toy_handle("mnist", sizes), toy_handle("usps", sizes)


@pytest.fixture(scope="session")
def _small_encoder(small_domains):
    src, tgt = small_domains
    return pretrain_encoder([src.load("train"), tgt.load("train")], 10, epochs=3, seed=0)


@pytest.fixture
def small_encoder(_small_encoder):
    """A fresh copy per test so locking never leaks between tests."""
    enc = copy.deepcopy(_small_encoder)
    enc.eval()
    return enc


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
