import numpy as np
import pytest

from megan.model import MeganConfig


@pytest.fixture(autouse=True)
def _reference_precision(monkeypatch):
    monkeypatch.delenv("MEGAN_REFERENCE_PRECISION", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return MeganConfig(channels=4, n=1, m1=1, m2=1, m3=1, tau=1, K=1)
