#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Exceptions raised by the pipeline

Each exception derives from the builtin it specialises, so callers that only know
about ``ValueError`` or ``FileNotFoundError`` keep working. The ``exit_code`` attribute
is what :func:`prefdiff.cli.main` returns when the exception reaches it.

"""

__author__ = "prefdiff developers"
__date__ = "2024-09-30"

import types


class PrefdiffError(Exception):
    """Base class of all pipeline errors"""

    exit_code = 1


class ConfigError(PrefdiffError, ValueError):
    """Invalid run configuration

    Args:
        problems (list[str]): One message per offending key
    """

    exit_code = 1

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.problems))


class RunLockedError(PrefdiffError, RuntimeError):
    """Another process holds the run directory lock"""

    exit_code = 1


class PrerequisiteError(PrefdiffError, FileNotFoundError):
    """An upstream artifact is missing

    Args:
        artifact (str): Path of the missing artifact
        stage (str): Subcommand producing the artifact
    """

    exit_code = 2

    def __init__(self, artifact, stage):
        self.artifact = str(artifact)
        self.stage = stage
        super().__init__(f"Missing {self.artifact}, run `prefdiff {stage}` first")


class ArtifactError(PrefdiffError, ValueError):
    """An artifact exists but cannot be used (version, checksum, truncation, fingerprint)"""

    exit_code = 2


class DivergenceError(PrefdiffError, FloatingPointError):
    """Numerical divergence during training or alignment"""

    exit_code = 3


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
