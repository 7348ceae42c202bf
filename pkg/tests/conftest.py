"""Shared fixtures: small banks, seeded generators, and the optional natural-image corpus."""

import os

import numpy as np
import pytest

from engine.loggabor import BankParams, build_bank

SMALL_PARAMS = BankParams(n_scales=2, n_orientations=4)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running property checks (learning, multi-seed runs)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bank16():
    return build_bank(SMALL_PARAMS, 16, workers=1)


@pytest.fixture(scope="session")
def bank32():
    return build_bank(SMALL_PARAMS, 32, workers=1)


@pytest.fixture(scope="session")
def bank64():
    return build_bank(BankParams(n_scales=3, n_orientations=8), 64, workers=1)


@pytest.fixture(scope="session")
def corpus_manifest():
    """Manifest of natural images; tests using it skip when SPARSELETS_CORPUS is unset."""
    path = os.environ.get("SPARSELETS_CORPUS")
    if not path or not os.path.exists(path):
        pytest.skip("No natural-image corpus: set SPARSELETS_CORPUS to a manifest file")
    return path
