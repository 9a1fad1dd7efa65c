import numpy as np
import pandas as pd
import pytest

from prefdiff.util import defaults, flattened, get, moving_average, val, wrap_angle, wrap_pm_pi


def test_wrap_angle():
    x = np.array([-np.pi, 0, 3 * np.pi])
    np.testing.assert_allclose(wrap_angle(x), [np.pi, 0, np.pi])
    y = wrap_pm_pi(np.array([1.5 * np.pi, -1.5 * np.pi]))
    np.testing.assert_allclose(y, [-0.5 * np.pi, 0.5 * np.pi])


def test_get():
    class Obj:
        a = 1

    assert get(Obj(), "a") == 1
    assert get({"b": [2]}, "b") == 2
    assert get(Obj(), "missing", None) is None
    np.testing.assert_array_equal(get(pd.DataFrame(dict(c=[1, 2])), "c"), [1, 2])
    with pytest.raises(AttributeError):
        get(Obj(), "missing")


def test_val_defaults_flattened():
    assert val(np.array([3.0])) == 3.0
    assert defaults(dict(a=1), a=2, b=3) == dict(a=1, b=3)
    assert defaults(None, a=2) == dict(a=2)
    assert flattened([[1, [2]], 3]) == [1, 2, 3]


def test_moving_average_constant_and_identity():
    np.testing.assert_allclose(moving_average(np.full(7, 2.5), 4), 2.5)
    x = np.arange(5.0)
    np.testing.assert_array_equal(moving_average(x, 1), x)


def test_moving_average_step_series():
    x = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    y = moving_average(x, 3)
    assert len(y) == len(x)
    # interior samples average their neighbors, edges shrink the window
    np.testing.assert_allclose(y[[0, 3, 4, 7]], [0, 1 / 3, 2 / 3, 1])


def test_moving_average_errors():
    with pytest.raises(ValueError):
        moving_average(np.ones(3), 0)
    with pytest.raises(ValueError):
        moving_average(np.array([]), 3)
