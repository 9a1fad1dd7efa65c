#!/usr/bin/env python3
# -*- coding: utf-8 -*-

__author__ = "prefdiff developers"


__version__ = "0.1.0"

from .errors import (
    PrefdiffError,
    ConfigError,
    RunLockedError,
    PrerequisiteError,
    ArtifactError,
    DivergenceError,
)
from .config import RunConfig, load_config, fingerprint
from .gaitsim import GAITS, EnvConstants, ExpertPolicy, reset, step
from .datasets import Trajectory, NormStats, Segment, collect, fit_norm
from .diffusion import DiffusionConfig, DiffusionPlanner, train_bc
from .preference import PreferenceConfig, PreferencePair, build_index, build_preference_dataset
from .align import AlignConfig, align
from .evalharness import EvalConfig, EvalReport, evaluate, ablation_suite
from .properties import register_property, register_derived_property
from .plot import TrajectoryPlot, TracePlot, StabilityPlot
from .pipeline import Pipeline
