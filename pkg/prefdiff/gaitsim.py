#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Planar phase-leg quadruped

A deterministic toy locomotion environment: four legs are phase oscillators advanced by
the action, legs in stance (sin φ < 0) propel the body forward, left/right asymmetry and
mis-coordination with the gait template tilt it. The robot falls when the tilt exceeds
``tilt_fall``.

Legs are ordered front-left, front-right, rear-left, rear-right (FL, FR, RL, RR).

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-01"


import types
from dataclasses import dataclass, field

import numpy as np

from .util import get, wrap_angle, wrap_pm_pi


STATE_FEATURES = (
    "v_cmd",
    "v",
    "tilt",
    "phi_fl",
    "phi_fr",
    "phi_rl",
    "phi_rr",
    "rate_fl",
    "rate_fr",
    "rate_rl",
    "rate_rr",
    "clock",
)
ACTION_FEATURES = ("a_fl", "a_fr", "a_rl", "a_rr")
STATE_DIM = len(STATE_FEATURES)
ACTION_DIM = len(ACTION_FEATURES)

# column indices into the state vector
V_CMD, V, TILT = 0, 1, 2
PHASES = slice(3, 7)
RATES = slice(7, 11)
CLOCK = 11


@dataclass(frozen=True)
class EnvConstants:
    """Constants of the simulator and the expert controller

    The values of ``k_v`` and ``k_t`` are retuned such that the expert never falls
    and tracks the commanded speed (see DESIGN.md); all others are the nominal values.
    """

    k_d: float = 0.05  # velocity damping
    c_prop: float = 0.10  # propulsion per rad of stance-leg advance
    k_t: float = 0.004  # tilt from lateral asymmetry
    k_r: float = 0.02  # tilt recovery
    coord_penalty: float = 0.01  # tilt from deviation of the gait template
    tilt_fall: float = 0.5  # rad
    a_max: float = 0.5  # rad/step
    clock_period: int = 50  # steps
    reset_perturbation: float = 0.1  # rad
    v_cmd_min: float = 0.1  # m/s
    v_cmd_max: float = 1.5  # m/s
    disturbance: float = 0.02  # m/s per step, half-width of the uniform velocity kick
    max_steps: int = 250
    # expert controller
    omega_base: float = 0.25
    k_v: float = 4.0
    k_sync: float = 0.3


@dataclass(frozen=True)
class GaitTemplate:
    """Target relative phase offsets of the legs

    Attributes:
        name (str): pacing, trotting or bounding
        offsets (tuple[float]): Phase offsets in rad of FL, FR, RL, RR relative to FL
    """

    name: str
    offsets: tuple

    def __post_init__(self):
        if len(self.offsets) != 4 or self.offsets[0] != 0:
            raise ValueError(f"Gait {self.name}: need 4 offsets with offsets[0] = 0")


GAITS = {
    # lateral pairs in phase
    "pacing": GaitTemplate("pacing", (0.0, np.pi, 0.0, np.pi)),
    # diagonal pairs in phase
    "trotting": GaitTemplate("trotting", (0.0, np.pi, np.pi, 0.0)),
    # front and rear pairs in phase
    "bounding": GaitTemplate("bounding", (0.0, 0.0, np.pi, np.pi)),
}


def get_gait(gait):
    """Return the gait template for a name (templates are passed through)"""
    if isinstance(gait, GaitTemplate):
        return gait
    try:
        return GAITS[gait]
    except KeyError:
        raise ValueError(f"Unknown gait `{gait}`, expected one of {list(GAITS)}") from None


@dataclass(frozen=True)
class EnvState:
    """Observation of the simulator

    Attributes:
        v_cmd (float): Commanded forward velocity in m/s
        v (float): Body forward velocity in m/s
        tilt (float): Lateral tilt in rad
        phases (np.ndarray): Leg phases in [0, 2π)
        phase_rates (np.ndarray): Last applied phase increments in rad/step
        clock (float): Gait clock in [0, 1)
    """

    v_cmd: float
    v: float
    tilt: float
    phases: np.ndarray = field(repr=False)
    phase_rates: np.ndarray = field(repr=False)
    clock: float

    def to_vector(self):
        """Return the 12-dimensional state vector (order of :data:`STATE_FEATURES`)"""
        return np.concatenate(
            ([self.v_cmd, self.v, self.tilt], self.phases, self.phase_rates, [self.clock])
        )

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"State vector must have shape ({STATE_DIM},), got {x.shape}")
        return cls(x[V_CMD], x[V], x[TILT], x[PHASES].copy(), x[RATES].copy(), x[CLOCK])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))


@dataclass(frozen=True)
class StepResult:
    """Outcome of one simulation step

    Attributes:
        next_state (EnvState): State after the step
        reward (float): Step reward
        done (bool): True if the robot fell or the step budget is exhausted
        fell (bool): True if the robot fell
    """

    next_state: EnvState
    reward: float
    done: bool
    fell: bool


def reset(gait, v_cmd, seed, env=None):
    """Start an episode

    Args:
        gait (GaitTemplate | str): Gait template
        v_cmd (float): Commanded velocity in m/s
        seed (int | list[int]): Seed of the phase perturbation
        env (EnvConstants | None): Simulator constants

    Returns:
        EnvState: Robot at rest with legs on the template up to a uniform perturbation

    Raises:
        ValueError: if v_cmd is out of range
    """
    env = env or EnvConstants()
    gait = get_gait(gait)
    if not env.v_cmd_min <= v_cmd <= env.v_cmd_max:
        raise ValueError(
            f"Commanded velocity {v_cmd} m/s outside [{env.v_cmd_min}, {env.v_cmd_max}]"
        )
    rng = np.random.default_rng(seed)
    p = env.reset_perturbation
    phases = wrap_angle(np.array(gait.offsets) + rng.uniform(-p, p, size=4))
    return EnvState(float(v_cmd), 0.0, 0.0, phases, np.zeros(4), 0.0)


def _template_deviation(phases, gait):
    """Absolute deviation of each leg from the template, relative to the FL leg"""
    return np.abs(wrap_pm_pi(phases - phases[0] - np.array(gait.offsets)))


def step(state, action, gait, disturbance=0.0, env=None, *, steps_left=None):
    """Advance the simulator by one step

    Args:
        state (EnvState): Current state
        action (np.ndarray): Phase increments of the 4 legs, clamped to [0, a_max]
        gait (GaitTemplate | str): Gait template
        disturbance (float): Velocity kick added this step
        env (EnvConstants | None): Simulator constants
        steps_left (int | None): Remaining step budget including this step.
            If given, the result is marked done when the budget is exhausted.

    Returns:
        StepResult: Next state, reward and termination

    Raises:
        ValueError: on non-finite input
    """
    env = env or EnvConstants()
    gait = get_gait(gait)
    action = np.asarray(action, dtype=float)
    if action.shape != (ACTION_DIM,):
        raise ValueError(f"Action must have shape ({ACTION_DIM},), got {action.shape}")
    if not (state.is_finite() and np.all(np.isfinite(action)) and np.isfinite(disturbance)):
        raise ValueError("Non-finite state, action or disturbance")

    a = np.clip(action, 0.0, env.a_max)
    phases = wrap_angle(state.phases + a)
    sin = np.sin(phases)
    stance = sin < 0

    v = (1 - env.k_d) * state.v + env.c_prop * np.sum(a[stance]) + disturbance
    asym = (sin[0] + sin[2]) - (sin[1] + sin[3])
    maxdev = np.max(_template_deviation(phases, gait))
    tilt = (1 - env.k_r) * state.tilt + env.k_t * asym + env.coord_penalty * maxdev
    clock = np.mod(state.clock + 1 / env.clock_period, 1.0)

    reward = np.exp(-abs(v - state.v_cmd)) - 0.1 * abs(tilt)
    fell = bool(abs(tilt) > env.tilt_fall)
    done = fell or (steps_left is not None and steps_left <= 1)
    next_state = EnvState(state.v_cmd, float(v), float(tilt), phases, a, float(clock))
    return StepResult(next_state, float(reward), done, fell)


def expert_action(state, gait, env=None):
    """Closed-form oscillator controller

    Each leg advances at the base rate plus a proportional speed correction, and is
    pulled towards its template offset relative to the front-left leg.

    Args:
        state (EnvState): Current state
        gait (GaitTemplate | str): Gait template
        env (EnvConstants | None): Controller constants

    Returns:
        np.ndarray: Phase increments of the 4 legs
    """
    env = env or EnvConstants()
    gait = get_gait(gait)
    if not state.is_finite():
        raise ValueError("Non-finite state")
    sync = wrap_pm_pi(state.phases[0] + np.array(gait.offsets) - state.phases)
    a = env.omega_base + env.k_v * (state.v_cmd - state.v) + env.k_sync * sync
    return np.clip(a, 0.0, env.a_max)


def evaluate_reward(trajectory):
    """Cumulative reward of a trajectory or segment"""
    return float(np.sum(get(trajectory, "rewards")))


class ExpertPolicy:
    """The expert controller as a policy emitting one action per call

    Args:
        gait (GaitTemplate | str): Gait template
        env (EnvConstants | None): Controller constants
    """

    source = "expert"

    def __init__(self, gait, env=None):
        self.gait = get_gait(gait)
        self.env = env or EnvConstants()

    def __call__(self, state, rng=None):
        return expert_action(state, self.gait, self.env)[np.newaxis, :]


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
