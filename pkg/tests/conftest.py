from dataclasses import replace

import numpy as np
import pytest

from fdbeam.config import ArrayGeometry, derive_grid, paper_setup
from fdbeam.experiment import Pipeline


def small_setup(num_elements=8, num_samples=512, num_lines=1, **changes):
    """Paper pulse and rates with a short window and few elements."""
    cfg, geom = paper_setup(num_lines=num_lines)
    c = geom.speed_of_sound
    geom = ArrayGeometry.linear(num_elements, c / (2 * cfg.carrier_f0), c)
    cfg = replace(cfg, depth=num_samples * c / (2 * cfg.sample_rate), **changes)
    return cfg, geom


@pytest.fixture(scope="session")
def small():
    cfg, geom = small_setup(kernel_eps=1e-3)
    return Pipeline(cfg, geom)


@pytest.fixture(scope="session")
def paper():
    cfg, geom = paper_setup(num_lines=1)
    return Pipeline(cfg, geom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
