#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Figures of trajectories and evaluation results

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-09"


import re
import types

import matplotlib as mpl
import matplotlib.pyplot as plt
import numpy as np

from .properties import find_property, to_unit, ureg
from .util import defaults, flattened


class AngleLocator(mpl.ticker.MaxNLocator):
    def __init__(self, n=5):
        """A tick locator placing ticks at fractions of π

        Args:
            n (int): Number of ticks to produce (best effort)
        """
        super().__init__(n)
        self.n = n
        self.multiples = list(np.pi / np.array((12, 6, 4, 3, 2, 1)))

    def _raw_ticks(self, vmin, vmax):
        if vmax - vmin < self.n * self.multiples[0]:
            return super()._raw_ticks(vmin, vmax)
        step = next((m for m in self.multiples if (vmax - vmin) / m <= self.n), np.pi)
        while (vmax - vmin) / step > self.n:
            step += np.pi
        return np.arange(int(vmin / step) * step, vmax + step, step)


class RadiansFormatter(mpl.ticker.Formatter):
    """Format angles in radians as fractions or multiples of π"""

    def __call__(self, x, pos=None):
        if x == 0:
            return "0"
        s = "-" if x < 0 else ""
        x = abs(x)
        if abs(x - np.pi) < 1e-10:
            return f"${s}\\pi$"
        for n in (2, 3, 4, 6, 12):
            m = round(x / (np.pi / n))
            if abs(x - m * np.pi / n) < 1e-10 and m % n:
                return f"${s}{'' if m == 1 else m}\\pi/{n}$"
        return f"${s}{x / np.pi:g}\\pi$"


class Plot:
    def __init__(
        self, *, display_units=None, ax=None, grid=True, properties=None, **subplots_kwargs
    ):
        """Base class for figures

        Args:
            display_units (dict | None): Units to display properties in, by property name
            ax (matplotlib.axes.Axes | None): Axes to plot onto. If None, a new figure is created.
            grid (bool): Show grid lines
            properties (dict | None): Additional properties by name
            subplots_kwargs: Keyword arguments passed to :func:`matplotlib.pyplot.subplots`
        """
        self._properties = dict(properties or {})
        self._display_units = dict(display_units or {})
        if ax is None:
            _, ax = plt.subplots(**subplots_kwargs)
        self.ax = ax
        self.fig = self.axflat[0].figure
        if grid:
            for a in self.axflat:
                a.grid(grid, alpha=0.5)

    @property
    def axflat(self):
        """Flat list of all axes"""
        return flattened(self.ax)

    def prop(self, name):
        return find_property(name, extra_properties=self._properties)

    def display_unit_for(self, p):
        return self._display_units.get(p, self.prop(p).unit)

    def label_for(self, *pp, unit=True):
        """Axis label for properties sharing an axis

        Args:
            pp: Property names
            unit (bool): Append the display unit

        Returns:
            str: Label like ``Velocity   $v$, $\\bar v$ / $m/s$``
        """
        pp = [p for p in pp if p is not None]
        if not pp:
            return ""
        symbols = list(dict.fromkeys(self.prop(p).symbol for p in pp))
        label = ", ".join(symbols)
        descriptions = {self.prop(p).description for p in pp}
        if len(descriptions) == 1 and (desc := descriptions.pop()):
            label = f"{desc}   {label}"
        units = {self.display_unit_for(p) for p in pp}
        if unit and len(units) == 1:
            u = ureg.Unit(units.pop())
            if u != ureg.Unit("1"):
                if re.findall(r"[-+](?![^{]*\})", label.split("   ")[-1]):
                    label = f"({label})"
                # mathtext needs an escaped percent sign
                label += " / $" + re.sub(r"(?<!\\)%", r"\\%", f"{u:~L}") + "$"
        return label

    def save(self, fname, **kwargs):
        """Save the figure

        Args:
            fname (str): Filename
            kwargs: Keyword arguments passed to :meth:`matplotlib.figure.Figure.savefig`
        """
        self.fig.savefig(fname, **defaults(kwargs, dpi=150, metadata={"Software": None}))

    def title(self, title, **kwargs):
        self.fig.suptitle(title, **kwargs)


class ManifoldPlot(Plot):
    def __init__(self, on_x, on_y, **kwargs):
        """Subplots sharing the x-axis

        The string ``on_y`` lists the properties per subplot separated by
        ``,`` and per trace separated by ``+``, e.g. ``"v+v_cmd,tilt"``.

        Args:
            on_x (str): Property on the x-axis
            on_y (str | list): Subplot specification
            kwargs: See :class:`Plot`
        """
        self.on_x = on_x
        self.on_y = self.parse_nested_list_string(on_y)
        super().__init__(nrows=len(self.on_y), ncols=1, sharex="all", squeeze=False, **kwargs)
        for a, pp in zip(self.axflat, self.on_y):
            a.set(ylabel=self.label_for(*pp))
            if {self.display_unit_for(p) for p in pp} == {"rad"}:
                a.yaxis.set_major_locator(AngleLocator())
                a.yaxis.set_major_formatter(RadiansFormatter())
        self.axflat[-1].set(xlabel=self.label_for(self.on_x))

    @staticmethod
    def parse_nested_list_string(spec, separators=",+"):
        """Parse a separated string (or nested list) into a nested list of names

        Example:
            >>> ManifoldPlot.parse_nested_list_string("v+v_cmd, tilt")
            [['v', 'v_cmd'], ['tilt']]
        """
        if isinstance(spec, str):
            elements = [e.strip() for e in spec.split(separators[0])]
        else:
            elements = list(spec)
        if len(separators) > 1:
            return [ManifoldPlot.parse_nested_list_string(e, separators[1:]) for e in elements]
        return elements

    def legend(self, **kwargs):
        for a in self.axflat:
            if len(a.get_legend_handles_labels()[0]) > 1:
                a.legend(**kwargs)


class TrajectoryPlot(ManifoldPlot):
    """Features of a trajectory over the steps of the episode"""

    def __init__(self, trajectory=None, kind="v+v_cmd,tilt", **kwargs):
        """

        Args:
            trajectory (Trajectory | None): Trajectory to show
            kind (str | list): Subplot specification, see :class:`ManifoldPlot`
            kwargs: See :class:`Plot`
        """
        super().__init__("step", kind, **kwargs)
        self.artists = [
            [a.plot([], [], label=self.prop(p).description or self.prop(p).symbol)[0] for p in pp]
            for a, pp in zip(self.axflat, self.on_y)
        ]
        self.legend()
        if trajectory is not None:
            self.update(trajectory, autoscale=True)

    def update(self, trajectory, autoscale=False):
        """Show a trajectory

        Args:
            trajectory (Trajectory): Trajectory to show
            autoscale (bool): Rescale the axes

        Returns:
            list: Changed artists
        """
        x = self.prop(self.on_x).values(trajectory, unit=self.display_unit_for(self.on_x))
        changed = []
        for a, pp, artists in zip(self.axflat, self.on_y, self.artists):
            for p, artist in zip(pp, artists):
                artist.set_data(x, self.prop(p).values(trajectory, unit=self.display_unit_for(p)))
                changed.append(artist)
            if autoscale:
                a.relim()
                a.autoscale()
        return changed


class TracePlot(ManifoldPlot):
    """Raw and smoothed velocity traces of several planners"""

    def __init__(self, traces=None, *, v_cmd=None, **kwargs):
        """

        Args:
            traces (dict[str, pd.DataFrame] | None): Trace tables (step, raw_v, smoothed_v)
            v_cmd (float | None): Commanded velocity drawn as reference line
            kwargs: See :class:`Plot`
        """
        super().__init__("step", "smoothed_v+raw_v", **kwargs)
        self.ax_v = self.axflat[0]
        self.artists = {}
        if traces is not None:
            self.update(traces, v_cmd=v_cmd)

    def update(self, traces, *, v_cmd=None):
        """Add traces, one color per label

        Args:
            traces (dict[str, pd.DataFrame]): Trace tables by label
            v_cmd (float | None): Commanded velocity

        Returns:
            list: Added artists
        """
        added = []
        for label, trace in traces.items():
            step = self.prop("step").values(trace)
            raw = self.prop("raw_v").values(trace, unit=self.display_unit_for("raw_v"))
            smooth = self.prop("smoothed_v").values(trace, unit=self.display_unit_for("raw_v"))
            (line,) = self.ax_v.plot(step, smooth, label=label)
            (faint,) = self.ax_v.plot(step, raw, color=line.get_color(), alpha=0.25, lw=0.8)
            self.artists[label] = (line, faint)
            added += [line, faint]
        if v_cmd is not None:
            added.append(self.ax_v.axhline(v_cmd, color="k", ls="--", lw=1, label="Command"))
        self.ax_v.legend()
        return added


class StabilityPlot(Plot):
    """Bar chart of the stability of several planners per gait"""

    def __init__(self, table=None, *, metric="stability_pct", **kwargs):
        """

        Args:
            table (pd.DataFrame | None): Rows with gait, planner and the metric column
            metric (str): Column to show
            kwargs: See :class:`Plot`
        """
        super().__init__(**kwargs)
        self.metric = metric
        self.ax.set(ylabel=self.label_for(metric))
        self.bars = {}
        if table is not None:
            self.update(table)

    def update(self, table):
        """Draw the mean of the metric per gait and planner

        Args:
            table (pd.DataFrame): Table of evaluation results

        Returns:
            dict: Bar containers by planner
        """
        means = table.groupby(["gait", "planner"], sort=False)[self.metric].mean().unstack()
        gaits, planners = list(means.index), list(means.columns)
        width = 0.8 / max(len(planners), 1)
        x = np.arange(len(gaits))
        for i, planner in enumerate(planners):
            values = to_unit(
                means[planner], self.prop(self.metric).unit, self.display_unit_for(self.metric)
            )
            self.bars[planner] = self.ax.bar(
                x + (i - (len(planners) - 1) / 2) * width, values, width, label=planner
            )
        self.ax.set(xticks=x, xticklabels=gaits)
        self.ax.legend()
        return self.bars


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
