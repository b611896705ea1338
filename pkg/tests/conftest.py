"""Shared fixtures for the test suite."""

from pathlib import Path

import pytest

from sgrnn.data import synthetic_dynamic_graph

FIXTURE_DIR = Path(__file__).parent / "fixtures"
ENRON_FIXTURE = FIXTURE_DIR / "enron_sim.snapshots"


@pytest.fixture(scope="session")
def enron_path() -> Path:
    assert ENRON_FIXTURE.exists(), "run scripts/make_enron_fixture.py first"
    return ENRON_FIXTURE


@pytest.fixture(scope="session")
def two_clique_sequence():
    """60-node, 8-snapshot drifting two-community graph."""
    return synthetic_dynamic_graph(60, 8, 2, 0.95, 0.02, 0.05, seed=1)
