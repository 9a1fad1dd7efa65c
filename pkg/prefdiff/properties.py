#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Unit-aware trajectory features

Every column of a trajectory, a velocity trace or an evaluation table is described by a
:class:`Property` with a symbol and a physical unit. Values can be read from any object
supported by :func:`prefdiff.util.get` and converted to compatible units.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-09"


import inspect
import types

import numpy as np
import pint

from .util import get


ureg = pint.UnitRegistry()
# simulator time base, rates are given per control step
ureg.define("control_step = [control_time] = step")


def to_unit(values, unit, to=None):
    """Convert values from one unit to another

    Args:
        values (np.ndarray | float): Values in ``unit``
        unit (str): Unit of the values
        to (str | None): Target unit, values are returned unchanged if None

    Raises:
        pint.DimensionalityError: for incompatible units
    """
    values = np.array(values, dtype=float)
    if to is None or to == unit:
        return values
    return values * ureg.Quantity(1, unit).to(to).magnitude


class Property:
    def __init__(self, symbol, unit, description=None):
        """Generic property information

        Args:
            symbol (str): Short symbol, preferably latex (e.g. $v$)
            unit (str): Physical unit of the data
            description (str | None): Longer description for legends and axes labels
        """
        self.symbol = symbol
        self.unit = unit
        self.description = description
        ureg.Unit(self.unit)  # raises for unknown units

    def values(self, data, mask=None, *, unit=None):
        raise NotImplementedError("Abstract property does not provide values")

    def __repr__(self):
        r = f"{self.__class__.__name__}({self.symbol}, unit={self.unit}"
        if self.description is not None:
            r += f", description={self.description}"
        return r + ")"


class DataProperty(Property):
    def __init__(self, key, unit, symbol=None, description=None):
        """Property read directly from the data

        Args:
            key (str): Column, attribute or index name
            unit (str): Physical unit of the data
            symbol (str | None): Symbol, defaults to the key
            description (str | None): Longer description
        """
        super().__init__(symbol or f"${key}$", unit, description)
        self.key = key

    def values(self, data, mask=None, *, unit=None):
        """Get masked values

        Args:
            data (Any): Trajectory, data frame or mapping providing the values
            mask (Any): Optional slice or boolean mask
            unit (str | None): Unit to convert to
        """
        v = np.array(get(data, self.key), dtype=float).flatten()
        if mask is not None:
            v = v[mask]
        return to_unit(v, self.unit, unit)


class DerivedProperty(Property):
    def __init__(self, symbol, unit, evaluate, description=None):
        """Property computed from other properties

        Args:
            symbol (str): Symbol
            unit (str): Physical unit of the result
            evaluate (callable): Function whose parameter names are the names of the
                properties it depends on, the values are passed in their data units
            description (str | None): Longer description
        """
        super().__init__(symbol, unit, description)
        self.evaluate = evaluate

    def values(self, data, mask=None, *, unit=None):
        dependents = inspect.signature(self.evaluate).parameters
        args = {d: find_property(d).values(data, mask) for d in dependents}
        return to_unit(self.evaluate(**args), self.unit, unit)


_default_properties = {}
_user_properties = {}


def find_property(name, *, extra_properties=None):
    """Find a property by name

    Args:
        name (str): Property name
        extra_properties (dict | None): Properties taking precedence over the registry

    Returns:
        Property: The property

    Raises:
        ValueError: if the property is not known
    """
    for registry in (extra_properties or {}, _user_properties, _default_properties):
        if name in registry:
            return registry[name]
    raise ValueError(
        f"Property `{name}` is not known, please register it with `register_property`"
    )


def register_property(name, prop):
    """Register a user defined property (takes precedence over the defaults)"""
    _user_properties[name] = prop


def register_derived_property(name, function, unit, symbol=None, description=None):
    """Register a property computed from other properties

    Args:
        name (str): Property name
        function (callable): See :class:`DerivedProperty`
        unit (str): Unit of the result
        symbol (str | None): Symbol, defaults to the name
        description (str | None): Longer description
    """
    register_property(name, DerivedProperty(symbol or f"${name}$", unit, function, description))


P = DataProperty
LEGS = ("fl", "fr", "rl", "rr")

for p in [
    ## trajectories
    P("step", "control_step", "$t$", description="Step"),
    P("v_cmd", "m/s", "$v_\\mathrm{cmd}$", description="Commanded velocity"),
    P("v", "m/s", "$v$", description="Velocity"),
    P("tilt", "rad", "$\\theta$", description="Tilt"),
    *(P(f"phi_{leg}", "rad", f"$\\varphi_\\mathrm{{{leg.upper()}}}$") for leg in LEGS),
    *(
        P(f"rate_{leg}", "rad/control_step", f"$\\dot\\varphi_\\mathrm{{{leg.upper()}}}$")
        for leg in LEGS
    ),
    P("clock", "1", "$c$", description="Gait clock"),
    *(P(f"a_{leg}", "rad", f"$a_\\mathrm{{{leg.upper()}}}$") for leg in LEGS),
    P("reward", "1", "$r$", description="Reward"),
    ## velocity traces
    P("raw_v", "m/s", "$v$", description="Velocity"),
    P("smoothed_v", "m/s", "$\\bar v$", description="Smoothed velocity"),
    ## evaluation tables
    P("stability_pct", "percent", "$S$", description="Stability"),
    P("mean_velocity", "m/s", "$\\langle v \\rangle$", description="Mean velocity"),
    P("disturbance", "m/s", "$\\delta$", description="Disturbance"),
]:
    _default_properties[p.key] = p

_default_properties.update(
    speed_error=DerivedProperty(
        "$v - v_\\mathrm{cmd}$", "m/s", lambda v, v_cmd: v - v_cmd, description="Speed error"
    ),
)


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
