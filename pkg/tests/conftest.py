import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from celldet.model import BackboneConfig, HeadConfig, ModelConfig  # noqa: E402

_acceptance: dict[str, str] = {}


@pytest.fixture
def tiny_cfg():
    def make(**kw):
        bb = kw.pop("backbone", BackboneConfig(stage_channels=[4, 8, 8, 8], pyramid_channels=8))
        head = kw.pop("head", HeadConfig(hidden_dim=16, num_classes=3))
        return ModelConfig(backbone=bb, head=head, **kw)

    return make


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.outcome == "failed":
        _acceptance[report.nodeid.split("::")[-1]] = "failed"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
