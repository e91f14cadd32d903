from pathlib import Path

import pytest

from subtaskbench import datasets
from subtaskbench.cli import fixtures_dir, miner_data_dir
from subtaskbench.simenv import load_bundles

FIXTURES = fixtures_dir()
MINER_DATA = miner_data_dir()


@pytest.fixture(scope="session")
def fx() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def tasks():
    return datasets.load_tasks(FIXTURES / "tasks.yaml")


@pytest.fixture(scope="session")
def bundles():
    return load_bundles(FIXTURES / "bundles")


@pytest.fixture(scope="session")
def library():
    return datasets.load_library(FIXTURES / "library.yaml")


@pytest.fixture(scope="session")
def mail(bundles):
    return bundles["mail"]


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
