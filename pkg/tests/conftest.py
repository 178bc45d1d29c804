import numpy as np
import pytest

from fdivlab import measures, models


@pytest.fixture
def two_state():
    # symmetric rate-1 flip chain
    return models.build_finite_generator(np.array([[0.0, 1.0], [1.0, 0.0]]))


@pytest.fixture
def skewed():
    # asymmetric chain, invariant law [0.2, 0.8]
    return models.build_finite_generator(np.array([[0.0, 2.0], [0.5, 0.0]]))


@pytest.fixture
def mu_nu():
    mu = measures.finite_measure(np.array([0.9, 0.1]))
    nu = measures.finite_measure(np.array([0.5, 0.5]))
    return mu, nu
