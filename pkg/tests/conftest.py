import numpy as np
import pytest
import torch

from firebreak.landscape import Fuel, FuelCatalog, Landscape, WeatherScenario

torch.set_num_threads(1)

CATALOG = FuelCatalog({1: Fuel("grass", 0.6), 2: Fuel("shrub", 0.4), 3: Fuel("timber", 0.2)})


def make_landscape(rows, cols, cells=None, catalog=CATALOG, seed=0):
    if cells is None:
        rng = np.random.default_rng(seed)
        cells = rng.choice(list(catalog.codes), size=rows * cols, p=None)
    return Landscape(rows, cols, np.asarray(cells).reshape(-1), catalog)


@pytest.fixture
def catalog():
    return CATALOG


@pytest.fixture
def calm():
    return (WeatherScenario(0.0, 0.0, "calm"),)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
