import os

import pytest

from twograph.tensor import Rng

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
SHIPPED = ("backprop", "vae", "gan", "dac", "kickback")

# acceptance outcomes, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def config_path(name: str) -> str:
    return os.path.join(CONFIG_DIR, f"{name}.json")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("TWOGRAPH_SEED", raising=False)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
