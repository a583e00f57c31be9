"""Shared fixtures and the acceptance-criterion summary hook."""

import numpy as np
import pytest
import torch

# Populated by tests/test_acceptance.py; printed at the end of the session.
CRITERION_RESULTS = []


def record_criterion(number: int, description: str, passed: bool, detail: str = ""):
    CRITERION_RESULTS.append((number, description, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed, detail in sorted(CRITERION_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def smooth_image64():
    """Smooth low-frequency float64 test image, well suited to warping."""
    yy, xx = np.meshgrid(np.linspace(0, 1, 64), np.linspace(0, 1, 64), indexing="ij")
    img = np.zeros((64, 64, 3))
    for c in range(3):
        img[..., c] = 0.5 + 0.35 * np.sin(4.0 * xx + c) * np.cos(3.0 * yy - 0.5 * c)
    return img


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
