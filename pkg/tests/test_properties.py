import numpy as np
import pandas as pd
import pint
import pytest

from prefdiff.evalharness import rollout_episode, trace_frame
from prefdiff.gaitsim import ExpertPolicy
from prefdiff.properties import (
    DataProperty,
    find_property,
    register_derived_property,
    register_property,
    to_unit,
)


@pytest.fixture(scope="module")
def trajectory():
    return rollout_episode(ExpertPolicy("trotting"), "trotting", 0.5, max_steps=30, seed=0)


def test_to_unit():
    assert to_unit(1.0, "m/s", "km/h") == pytest.approx(3.6)
    assert to_unit(50.0, "percent", "1") == pytest.approx(0.5)
    np.testing.assert_array_equal(to_unit([1.0, 2.0], "rad"), [1.0, 2.0])
    assert to_unit(np.pi, "rad", "deg") == pytest.approx(180)
    with pytest.raises(pint.DimensionalityError):
        to_unit(1.0, "m/s", "rad")


def test_trajectory_properties(trajectory):
    np.testing.assert_array_equal(find_property("v").values(trajectory), trajectory["v"])
    np.testing.assert_array_equal(find_property("step").values(trajectory), np.arange(30))
    actions = find_property("a_rr").values(trajectory)
    np.testing.assert_array_equal(actions, trajectory.actions[:, 3])
    tilt = find_property("tilt").values(trajectory, slice(5, 10), unit="deg")
    np.testing.assert_allclose(tilt, np.degrees(trajectory["tilt"][5:10]))


def test_derived_speed_error(trajectory):
    error = find_property("speed_error").values(trajectory)
    np.testing.assert_array_equal(error, trajectory["v"] - 0.5)


def test_table_properties(trajectory):
    frame = trace_frame(trajectory, 3)
    np.testing.assert_array_equal(find_property("raw_v").values(frame), trajectory["v"])
    table = pd.DataFrame(dict(stability_pct=[25.0, 100.0]))
    np.testing.assert_allclose(find_property("stability_pct").values(table, unit="1"), [0.25, 1])


def test_find_and_register():
    with pytest.raises(ValueError, match="not known"):
        find_property("stride_length")
    extra = DataProperty("v", "km/h")
    assert find_property("v", extra_properties={"v": extra}) is extra
    register_property("stride", DataProperty("stride", "m"))
    assert find_property("stride").unit == "m"
    register_derived_property("double_v", lambda v: 2 * v, "m/s")
    assert find_property("double_v").values({"v": np.array([1.0, 2.0])})[1] == 4
    with pytest.raises(pint.UndefinedUnitError):
        DataProperty("x", "furlongs_per_step")
