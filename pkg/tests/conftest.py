from pathlib import Path

import pytest

from longmix.simulate import simulate_panel

DEFAULT_DATASET = Path(__file__).resolve().parents[1] / "data" / "ridership_weather.csv"


def pytest_addoption(parser):
    parser.addoption("--dataset", default=None,
                     help="canonical ridership-weather CSV (defaults to data/ridership_weather.csv)")


@pytest.fixture(scope="session")
def dataset_path(request):
    opt = request.config.getoption("--dataset")
    return Path(opt) if opt else DEFAULT_DATASET


@pytest.fixture(scope="session")
def panel():
    return simulate_panel(50, seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
