import numpy as np
import pytest

from app.services.basis_noise import BasisTruncation
from app.services.dynamics import ModelVariant, Variant
from app.services.initial_conditions import random_band, taylor_green
from app.services.spectral_core import GridSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def grid16():
    return GridSpec(2, 16)


@pytest.fixture
def grid32():
    return GridSpec(2, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tg16(grid16):
    return taylor_green(grid16)


@pytest.fixture
def smooth_field(grid32):
    """Solenoidal field with modes |k| <= 3"""
    return random_band(grid32, band=3, amplitude=1.0, seed=7)


@pytest.fixture
def trunc_k1():
    return BasisTruncation(2, 1, 3.0)


@pytest.fixture
def v1_k1(trunc_k1):
    return ModelVariant(Variant.V1_HAMILTONIAN, 0.05, trunc_k1)


@pytest.fixture
def write_config(tmp_path):
    """Write an INI run configuration and return its path"""
    def write(text: str, name: str = "run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return write
