import matplotlib

matplotlib.use("Agg")

import numpy as np
import pytest

from prefdiff.ndcore import flat_parameters, set_flat_parameters


def numerical_gradient(loss, net, step=1e-5):
    """Central finite differences of ``loss(net)`` with respect to every parameter"""
    theta = flat_parameters(net)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = loss(set_flat_parameters(net, plus))
        f_minus = loss(set_flat_parameters(net, minus))
        grad[i] = (f_plus - f_minus) / (2 * step)
    return grad


def assert_gradients_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    assert np.all(err <= rtol * scale + atol), f"max abs error {err.max():.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
