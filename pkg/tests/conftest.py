import numpy as np
import pytest

from geobeam.manifold import euclidean_metric, make_metric, sample_influx


@pytest.fixture(scope="session")
def m_euc():
    return euclidean_metric(1.0)


@pytest.fixture(scope="session")
def m_bump():
    return make_metric("gauss-bump")


@pytest.fixture(scope="session")
def m_hyp():
    return make_metric("hyperbolic")


@pytest.fixture(scope="session")
def fan64(m_euc):
    """64 x 64 influx grid on the unit Euclidean disk (shared: the sparse
    transform operators keyed on it are expensive to build)."""
    return sample_influx(m_euc, 64, 64)


@pytest.fixture(scope="session")
def fan32_bump(m_bump):
    return sample_influx(m_bump, 32, 32)


def smooth_phantom(P):
    """Smooth compactly-concentrated test function used across modules."""
    r2 = P[..., 0] ** 2 + P[..., 1] ** 2
    return np.exp(-r2 / (2 * 0.3**2)) * (
        1 + 0.3 * np.sin(3 * P[..., 0]) * np.cos(2 * P[..., 1])
    )
