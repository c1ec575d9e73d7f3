import numpy as np
import pytest

from klshampoo import estimators as est
from klshampoo import oracle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fresh_factor(S):
    """Factor whose eigen cache is the exact decomposition of ``S``."""
    return est.refresh_eigen(est.SpdFactor(np.asarray(S, dtype=float), None, None))


def spd(d, seed, cond=10.0):
    return oracle.random_spd(d, np.random.default_rng(seed), cond)


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))
