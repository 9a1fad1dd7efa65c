#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Run configuration

A run is described by one JSON document. Each block maps onto the settings dataclass
of the module owning it; missing keys take the defaults below, unknown keys are
rejected. The SHA-256 of the resolved configuration is the fingerprint every artifact
of the run carries.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-08"


import dataclasses
import hashlib
import json
import os
import types
from dataclasses import dataclass, field
from pathlib import Path

from .align import AlignConfig
from .datasets import DatasetConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .evalharness import EvalConfig
from .gaitsim import GAITS, EnvConstants
from .preference import LABEL_MODES, PreferenceConfig


RUN_ROOT_ENV = "PREFDIFF_RUN_ROOT"

SECTIONS = dict(
    env=EnvConstants,
    dataset=DatasetConfig,
    diffusion=DiffusionConfig,
    preference=PreferenceConfig,
    align=AlignConfig,
    eval=EvalConfig,
)


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of a run

    Attributes:
        seed (int): Run seed all random streams derive from
        gaits (tuple[str]): Gaits to process
        v_cmds (tuple[float]): Commanded speeds in m/s
        run_dir (str): Output directory, relative paths resolve against ``$PREFDIFF_RUN_ROOT``
    """

    seed: int = 0
    gaits: tuple = ("pacing", "trotting", "bounding")
    v_cmds: tuple = (0.5, 1.0)
    run_dir: str = "runs/default"
    env: EnvConstants = field(default_factory=EnvConstants)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    preference: PreferenceConfig = field(default_factory=PreferenceConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def run_path(self):
        """Absolute run directory"""
        path = Path(self.run_dir)
        if not path.is_absolute():
            path = Path(os.environ.get(RUN_ROOT_ENV, ".")) / path
        return path.resolve()


SCALARS = ("seed", "gaits", "v_cmds", "run_dir")
PLANNER_KINDS = ("expert", "untrained", "bc", "aligned")


def _coerce(cls, values):
    """Lists become tuples where the dataclass default is a tuple"""
    defaults = cls()
    return {
        k: tuple(v) if isinstance(getattr(defaults, k), tuple) and isinstance(v, list) else v
        for k, v in values.items()
    }


def from_dict(doc):
    """Build a :class:`RunConfig` from a (partial) JSON document

    Raises:
        ConfigError: listing every unknown key and every invalid value
    """
    if not isinstance(doc, dict):
        raise ConfigError(f"Configuration must be a JSON object, got {type(doc).__name__}")
    problems = []
    for key in doc:
        if key not in SCALARS and key not in SECTIONS:
            problems.append(f"{key}: unknown key")

    kwargs = {k: doc[k] for k in SCALARS if k in doc}
    kwargs = _coerce(RunConfig, kwargs)
    for name, cls in SECTIONS.items():
        block = doc.get(name, {})
        if not isinstance(block, dict):
            problems.append(f"{name}: expected an object, got {block!r}")
            continue
        known = {f.name for f in dataclasses.fields(cls)}
        problems += [f"{name}.{k}: unknown key" for k in block if k not in known]
        try:
            kwargs[name] = cls(**_coerce(cls, {k: v for k, v in block.items() if k in known}))
        except (TypeError, ValueError) as e:
            problems.append(f"{name}: {e}")
    if problems:
        raise ConfigError(problems)
    try:
        cfg = RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    try:
        validate(cfg)
    except TypeError as e:
        raise ConfigError(f"invalid value type: {e}") from e
    return cfg


def _check(problems, condition, key, message):
    if not condition:
        problems.append(f"{key}: {message}")


def validate(cfg):
    """Check value ranges and cross-field consistency

    Raises:
        ConfigError: listing every offending key
    """
    p = []
    _check(p, isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be an integer >= 0")
    _check(p, len(cfg.gaits) > 0, "gaits", "must not be empty")
    for g in cfg.gaits:
        _check(p, g in GAITS, "gaits", f"unknown gait {g!r}, expected one of {list(GAITS)}")
    _check(p, len(cfg.v_cmds) > 0, "v_cmds", "must not be empty")
    for v in cfg.v_cmds:
        _check(
            p,
            isinstance(v, (int, float)) and cfg.env.v_cmd_min <= v <= cfg.env.v_cmd_max,
            "v_cmds",
            f"{v!r} outside [{cfg.env.v_cmd_min}, {cfg.env.v_cmd_max}]",
        )
    _check(p, cfg.env.a_max > 0, "env.a_max", "must be positive")
    _check(p, cfg.env.max_steps >= 1, "env.max_steps", "must be >= 1")
    _check(p, cfg.env.clock_period >= 1, "env.clock_period", "must be >= 1")

    d = cfg.dataset
    _check(
        p,
        d.expert_episodes >= len(cfg.v_cmds),
        "dataset.expert_episodes",
        "need at least one episode per speed",
    )
    _check(p, d.planner_episodes >= 1, "dataset.planner_episodes", "must be >= 1")
    _check(
        p, d.max_steps > cfg.diffusion.horizon, "dataset.max_steps", "must exceed the horizon"
    )
    _check(p, d.workers >= 1, "dataset.workers", "must be >= 1")

    m = cfg.diffusion
    _check(p, m.horizon >= 1, "diffusion.horizon", "must be >= 1")
    _check(p, m.diffusion_steps >= 2, "diffusion.diffusion_steps", "must be >= 2")
    _check(
        p,
        0 < m.beta_min <= m.beta_max < 1,
        "diffusion.beta_min",
        "need 0 < beta_min <= beta_max < 1",
    )
    _check(p, len(m.hidden) >= 1 and min(m.hidden) >= 1, "diffusion.hidden", "need >= 1 layer")
    _check(p, m.embed_dim > 0 and m.embed_dim % 2 == 0, "diffusion.embed_dim", "must be even")
    _check(p, 0 <= m.p_drop < 1, "diffusion.p_drop", "must be in [0, 1)")
    _check(p, m.batch_size >= 1, "diffusion.batch_size", "must be >= 1")
    _check(p, m.train_steps >= 0, "diffusion.train_steps", "must be >= 0")
    _check(
        p,
        1 <= m.sampling_steps <= m.diffusion_steps,
        "diffusion.sampling_steps",
        f"must be in [1, {m.diffusion_steps}]",
    )

    r = cfg.preference
    _check(p, r.beta > 0, "preference.beta", "must be positive")
    _check(p, r.pairs >= 1, "preference.pairs", "must be >= 1")
    _check(p, r.mode in LABEL_MODES, "preference.mode", f"must be one of {LABEL_MODES}")

    a = cfg.align
    _check(p, a.epochs >= 0, "align.epochs", "must be >= 0")
    _check(p, a.batch_size >= 1, "align.batch_size", "must be >= 1")
    _check(p, a.logit_clamp > 0, "align.logit_clamp", "must be positive")

    e = cfg.eval
    _check(p, e.episodes >= 1, "eval.episodes", "must be >= 1")
    _check(p, len(e.seeds) > 0, "eval.seeds", "must not be empty")
    _check(p, e.trace_window >= 1, "eval.trace_window", "must be >= 1")
    _check(p, all(x >= 0 for x in e.disturbances), "eval.disturbances", "must be >= 0")
    for mode in e.modes:
        _check(p, mode in LABEL_MODES, "eval.modes", f"unknown mode {mode!r}")
    for kind in e.planners:
        _check(p, kind in PLANNER_KINDS, "eval.planners", f"unknown planner {kind!r}")
    if p:
        raise ConfigError(p)


def parse_override(text):
    """Split ``section.key=value`` into a key path and a value

    The value is parsed as a JSON literal, anything else is taken as a plain string.
    """
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"{text}: override must have the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc, overrides):
    """Return a copy of a config document with ``--set`` overrides applied"""
    doc = json.loads(json.dumps(doc))
    for text in overrides or ():
        path, value = parse_override(text)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{text}: {part} is not a section")
        node[path[-1]] = value
    return doc


def load_config(path=None, overrides=()):
    """Read a JSON config file (or the defaults) and apply overrides

    Args:
        path (str | Path | None): Config file
        overrides (list[str]): ``section.key=value`` overrides

    Returns:
        RunConfig: The validated configuration

    Raises:
        ConfigError: on unreadable files, unknown keys or invalid values
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"{path}: config file not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    return from_dict(apply_overrides(doc, overrides))


def fingerprint(cfg):
    """SHA-256 hex digest of the canonical JSON of a configuration"""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
