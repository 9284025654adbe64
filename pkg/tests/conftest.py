import numpy as np
import pytest

from fluidlob import load_config

from helpers import FIXTURES, strict_config


@pytest.fixture(scope="session")
def ref1():
    return load_config(FIXTURES / "ref1.json")


@pytest.fixture(scope="session")
def ref2():
    return load_config(FIXTURES / "ref2.json")


@pytest.fixture(scope="session")
def strict():
    return strict_config()


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
