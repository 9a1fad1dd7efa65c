#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Utility methods

"""

__author__ = "prefdiff developers"
__date__ = "2024-09-30"


import types

import numpy as np

try:
    import pandas as pd
except ImportError:
    # pandas is only needed for tabular artifacts
    pd = None


VOID = object()

TWO_PI = 2 * np.pi


def val(obj):
    """Return the value if this is an array of size 1, object otherwise"""
    if np.size(obj) == 1:
        return np.array(obj).item()
    return obj


def wrap_angle(values):
    """Wrap angles into [0, 2π)"""
    return np.mod(values, TWO_PI)


def wrap_pm_pi(values):
    """Wrap angle differences into [-π, π)"""
    return np.mod(values + np.pi, TWO_PI) - np.pi


def get(obj, value, default=VOID):
    """Get value from object

    Tries to get the value using attributes and indices,
    and handles special objects like pandas data frames.

    Args:
        obj (Any): Object to get data from
        value (str): Name of attribute, index, column etc. to get
        default (Any): Default value to return. By default an exception is raised

    Returns:
        Any: Value of the object

    Raises:
        AttributeError: if object does not provide the value and no default was specified
    """
    if pd is not None and isinstance(obj, pd.DataFrame):
        return val(obj[value].values)
    try:
        return val(getattr(obj, value))
    except Exception:
        try:
            return val(obj[value])
        except Exception:
            if default is not VOID:
                return default
    raise AttributeError(f"{obj!r} does not provide an attribute or index '{value}'")


def defaults(kwargs, /, **default_kwargs):
    """Return keyword arguments with defaults

    Returns a union of keyword arguments, where `kwargs` take precedence over `default_kwargs`.

    Args:
        kwargs (dict | None): keyword arguments (overwrite defaults)
        default_kwargs: default keyword arguments
    """
    return dict(default_kwargs, **(kwargs or {}))


def flattened(lists):
    """Flatten a list of nested lists recursively"""
    if hasattr(lists, "__iter__") and not isinstance(lists, str):
        return [item for sublist in lists for item in flattened(sublist)]
    return [lists]


def moving_average(data, window):
    """Centered moving average with a window that shrinks at the boundaries

    For an even window, the extra sample is taken from the right side,
    i.e. sample i averages data[i - (window-1)//2 : i + window//2 + 1]
    clipped to the valid range.

    Args:
        data (np.ndarray): 1D series
        window (int): Window length in samples (>= 1)

    Returns:
        np.ndarray: Smoothed series of the same length
    """
    data = np.asarray(data, dtype=float)
    if window < 1:
        raise ValueError(f"Window must be >= 1, but got window={window}")
    if data.ndim != 1 or data.size == 0:
        raise ValueError("Moving average requires a non-empty 1D series")
    if window == 1:
        return data.copy()
    n, right = data.size, window // 2
    kernel = np.ones(window)
    sums = np.convolve(data, kernel, mode="full")[right : right + n]
    counts = np.convolve(np.ones(n), kernel, mode="full")[right : right + n]
    return sums / counts


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
