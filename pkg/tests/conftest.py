import numpy as np
import pytest

from gudl.channels import generate_dataset
from gudl.sensing import SensingConfig, build_measurement, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_partial_orthogonal(m2, n2, rng):
    q, r = np.linalg.qr(rng.standard_normal((n2, n2)))
    q = q * np.sign(np.diag(r))
    return q[:m2]


@pytest.fixture
def small_A(rng):
    return random_partial_orthogonal(4, 8, rng)


@pytest.fixture(scope="module")
def synthetic_batch():
    """2N = 32 batch at 20 dB with its ground truth."""
    A, _ = build_measurement(SensingConfig(8, 16, seed=3))
    H = generate_dataset(24, 32, 2, seed=4).matrix()
    return A, H, simulate(A, H, 20.0, np.random.default_rng(5))
