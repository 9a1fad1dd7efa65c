#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Closed-loop evaluation

Rollouts of planners in the simulator, stability and speed metrics per seed,
smoothed velocity traces, disturbance sweeps and the alignment ablation grid.

An episode is stable if the robot does not fall within the step budget. Metrics are
pure functions of the rolled out trajectories, see :func:`report_from_trajectories`.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-07"


import logging
import types
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .align import align
from .datasets import Trajectory, collect
from .diffusion import DiffusionPlanner
from .errors import DivergenceError
from .gaitsim import ACTION_DIM, V, EnvConstants, get_gait, reset, step
from .preference import build_preference_dataset
from .util import moving_average


logger = logging.getLogger(__name__)

FALL_BIN = 25


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol

    Attributes:
        episodes (int): Episodes per seed
        seeds (tuple[int]): Evaluation seeds
        disturbance (float): Velocity kick half-width of the ablation runs
        disturbances (tuple[float]): Kick half-widths evaluated by the eval stage
        trace_window (int): Moving-average window of velocity traces
        trace_episodes (int): Number of episodes per planner written as velocity trace
        planners (tuple[str]): Planner kinds compared (expert, untrained, bc, aligned)
        pair_scales (tuple[float]): Pair budgets of the ablation relative to the base count
        modes (tuple[str]): Label modes of the ablation
        regularizations (tuple[float]): Regularization weights of the ablation
        workers (int): Threads simulating episodes concurrently
    """

    episodes: int = 64
    seeds: tuple = (0, 1, 2)
    disturbance: float = 0.02
    disturbances: tuple = (0.0, 0.02, 0.05)
    trace_window: int = 10
    trace_episodes: int = 1
    planners: tuple = ("expert", "untrained", "bc", "aligned")
    pair_scales: tuple = (0.5, 1.0, 1.5)
    modes: tuple = ("weak", "strong")
    regularizations: tuple = (0.0, 1.0)
    workers: int = 1


def rollout_episode(
    policy, gait, v_cmd, *, env=None, max_steps=250, seed=0, episode=0, disturbance=None
):
    """Run one closed-loop episode

    The policy is called with the measured state and returns a block of actions, which
    is executed step by step before the policy is queried again. The expert returns one
    action per call, a planner its first h actions.

    Random streams are derived from ``(seed, episode)``: the reset perturbation, the
    velocity kicks and the policy's sampling noise are independent of each other.

    Args:
        policy (callable): ``policy(state, rng) -> actions (n, ACTION_DIM)``
        gait (GaitTemplate | str): Gait template
        v_cmd (float): Commanded velocity in m/s
        env (EnvConstants | None): Simulator constants
        max_steps (int): Step budget
        seed (int): Run seed
        episode (int): Episode number
        disturbance (float | None): Half-width of the uniform velocity kick per step,
            defaults to ``env.disturbance``

    Returns:
        Trajectory: The recorded episode. Non-finite policy output ends it as a fall.
    """
    env = env or EnvConstants()
    gait = get_gait(gait)
    delta = env.disturbance if disturbance is None else disturbance
    state = reset(gait, v_cmd, [seed, episode], env)
    kick_rng = np.random.default_rng([seed, episode, 1])
    policy_rng = np.random.default_rng([seed, episode, 2])

    states, actions, rewards, dones = [], [], [], []
    fell, queue = False, []
    for t in range(max_steps):
        if not queue:
            try:
                block = np.asarray(policy(state, policy_rng), dtype=float)
            except DivergenceError as e:
                block = np.full((1, ACTION_DIM), np.nan)
                logger.debug("Policy diverged: %s", e)
            if block.ndim != 2 or block.shape[1] != ACTION_DIM or len(block) == 0:
                raise ValueError(f"Policy returned actions of shape {block.shape}")
            if not np.all(np.isfinite(block)):
                logger.warning(
                    "Episode %d (seed %d) aborted at step %d: non-finite policy output",
                    episode,
                    seed,
                    t,
                )
                fell = True
                if dones:
                    dones[-1] = True
                break
            queue = list(block)
        kick = delta * kick_rng.uniform(-1, 1)
        result = step(state, queue.pop(0), gait, kick, env, steps_left=max_steps - t)
        states.append(state.to_vector())
        actions.append(result.next_state.phase_rates)
        rewards.append(result.reward)
        dones.append(result.done)
        state = result.next_state
        if result.done:
            fell = result.fell
            break

    meta = dict(
        gait=gait.name,
        v_cmd=float(v_cmd),
        seed=int(seed),
        episode=int(episode),
        source=getattr(policy, "source", "planner"),
        disturbance=float(delta),
        fell=bool(fell),
    )
    return Trajectory(states, actions, rewards, dones, meta)


@dataclass
class EvalReport:
    """Metrics of one planner on one gait, speed and disturbance

    Attributes:
        gait (str): Gait name
        v_cmd (float): Commanded velocity in m/s
        planner (str): Planner label
        disturbance (float): Velocity kick half-width
        episodes (int): Rollouts per seed
        seeds (list[int]): Evaluation seeds
        stability_pct (list[float]): Percentage of episodes without fall, per seed
        mean_velocity (list[float]): Mean body velocity over all recorded steps, per seed
        fall_histogram (list[int]): Falls per bin of ``FALL_BIN`` steps, all seeds
        fingerprint (str | None): Config fingerprint
        trajectories (dict | None): Rollouts per seed (not serialized)
    """

    gait: str
    v_cmd: float
    planner: str
    disturbance: float
    episodes: int
    seeds: list
    stability_pct: list
    mean_velocity: list
    fall_histogram: list
    fingerprint: str = None
    trajectories: dict = field(default=None, repr=False, compare=False)

    @property
    def stability_mean(self):
        return float(np.mean(self.stability_pct))

    @property
    def velocity_mean(self):
        v = np.array(self.mean_velocity, dtype=float)
        v = v[np.isfinite(v)]
        return float(np.mean(v)) if len(v) else float("nan")

    def to_frame(self):
        """One row per seed"""
        return pd.DataFrame(
            [
                dict(
                    planner=self.planner,
                    gait=self.gait,
                    v_cmd=self.v_cmd,
                    disturbance=self.disturbance,
                    seed=seed,
                    episodes=self.episodes,
                    stability_pct=stability,
                    mean_velocity=velocity,
                )
                for seed, stability, velocity in zip(
                    self.seeds, self.stability_pct, self.mean_velocity
                )
            ]
        )

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "trajectories"}
        d.update(stability_mean=self.stability_mean, velocity_mean=self.velocity_mean)
        return d


def report_from_trajectories(
    trajs_by_seed, gait, v_cmd, *, planner, disturbance, max_steps, fingerprint=None
):
    """Compute the metrics of saved rollouts

    Args:
        trajs_by_seed (dict[int, list[Trajectory]]): Rollouts per seed
        gait (str): Gait name
        v_cmd (float): Commanded velocity
        planner (str): Planner label
        disturbance (float): Kick half-width
        max_steps (int): Step budget of the episodes
        fingerprint (str | None): Config fingerprint

    Returns:
        EvalReport: The report
    """
    seeds = list(trajs_by_seed)
    counts = {len(trajs) for trajs in trajs_by_seed.values()}
    if len(counts) != 1:
        raise ValueError(f"Seeds have different numbers of episodes: {sorted(counts)}")
    stability, velocity, fall_steps = [], [], []
    for seed in seeds:
        trajs = trajs_by_seed[seed]
        stability.append(100.0 * sum(not t.fell for t in trajs) / len(trajs))
        v = [t.states[:, V] for t in trajs if len(t)]
        velocity.append(float(np.mean(np.concatenate(v))) if v else float("nan"))
        fall_steps += [max(len(t) - 1, 0) for t in trajs if t.fell]
    edges = np.arange(0, max_steps + FALL_BIN, FALL_BIN)
    histogram, _ = np.histogram(fall_steps, bins=edges)
    return EvalReport(
        gait=getattr(gait, "name", gait),
        v_cmd=float(v_cmd),
        planner=planner,
        disturbance=float(disturbance),
        episodes=counts.pop(),
        seeds=seeds,
        stability_pct=stability,
        mean_velocity=velocity,
        fall_histogram=histogram.tolist(),
        fingerprint=fingerprint,
        trajectories=trajs_by_seed,
    )


def evaluate(
    policy,
    gait,
    v_cmd,
    episodes,
    seeds,
    *,
    env=None,
    max_steps=None,
    disturbance=None,
    workers=1,
    fingerprint=None,
):
    """Evaluate a policy over several seeds

    Args:
        policy (callable): Planner or expert policy
        gait (GaitTemplate | str): Gait template
        v_cmd (float): Commanded velocity in m/s
        episodes (int): Episodes per seed (>= 1)
        seeds (list[int]): Evaluation seeds
        env (EnvConstants | None): Simulator constants
        max_steps (int | None): Step budget, defaults to ``env.max_steps``
        disturbance (float | None): Kick half-width, defaults to ``env.disturbance``
        workers (int): Threads simulating episodes concurrently
        fingerprint (str | None): Config fingerprint recorded in the report

    Returns:
        EvalReport: Metrics, with the rollouts attached
    """
    env = env or EnvConstants()
    max_steps = env.max_steps if max_steps is None else max_steps
    disturbance = env.disturbance if disturbance is None else disturbance
    trajs = {
        int(seed): collect(
            policy,
            gait,
            v_cmd,
            episodes,
            max_steps,
            seed,
            env=env,
            workers=workers,
            disturbance=disturbance,
        )
        for seed in seeds
    }
    return report_from_trajectories(
        trajs,
        gait,
        v_cmd,
        planner=getattr(policy, "source", "planner"),
        disturbance=disturbance,
        max_steps=max_steps,
        fingerprint=fingerprint,
    )


def disturbance_sweep(
    policy, gait, v_cmd, episodes, seeds, disturbances=(0.0, 0.02, 0.05), **kwargs
):
    """Evaluate a policy at increasing kick half-widths

    Returns:
        list[EvalReport]: One report per disturbance
    """
    return [
        evaluate(policy, gait, v_cmd, episodes, seeds, disturbance=d, **kwargs)
        for d in disturbances
    ]


def velocity_trace(trajectory, window=10):
    """Body velocity of a trajectory smoothed with a centered moving average

    Raises:
        ValueError: for an empty trajectory or window < 1
    """
    if len(trajectory) == 0:
        raise ValueError("Cannot trace the velocity of an empty trajectory")
    return moving_average(trajectory["v"], window)


def trace_frame(trajectory, window=10):
    """Table of step, raw and smoothed velocity"""
    return pd.DataFrame(
        dict(
            step=trajectory["step"],
            raw_v=trajectory["v"],
            smoothed_v=velocity_trace(trajectory, window),
        )
    )


def reports_frame(reports):
    """Per-seed rows of several reports in one table"""
    return pd.concat([r.to_frame() for r in reports], ignore_index=True)


def ablation_suite(
    net,
    planner_trajs,
    index,
    stats,
    gait,
    v_cmd,
    *,
    diffusion_cfg,
    preference_cfg,
    align_cfg,
    eval_cfg,
    env=None,
    seed=0,
    progress=False,
):
    """Align and evaluate the planner over the ablation grid

    The grid is the cross product of pair budget, label mode and regularization weight.
    Each cell labels its own pairs and aligns a copy of ``net``, all cells are evaluated
    on the same seeds. A cell whose alignment diverges counts as stability 0.

    Args:
        net (DenseNet): Offline planner network
        planner_trajs (list[Trajectory]): Planner rollouts the pairs are drawn from
        index (ExpertIndex): Optimal expert index for weak labels
        stats (NormStats): Normalization statistics
        gait (str): Gait name
        v_cmd (float): Commanded velocity of the evaluation
        diffusion_cfg (DiffusionConfig): Planner settings
        preference_cfg (PreferenceConfig): Base pair count and β
        align_cfg (AlignConfig): Alignment settings (regularization is overridden)
        eval_cfg (EvalConfig): Grid axes and evaluation protocol
        env (EnvConstants | None): Simulator constants
        seed (int): Run seed
        progress (bool): Show alignment progress bars

    Returns:
        pd.DataFrame: One row per cell with a ``weak_strong_gap`` column
    """
    env = env or EnvConstants()
    rows = []
    for si, scale in enumerate(eval_cfg.pair_scales):
        n_pairs = max(1, int(round(scale * preference_cfg.pairs)))
        for mi, mode in enumerate(eval_cfg.modes):
            pairs = build_preference_dataset(
                planner_trajs,
                index,
                n_pairs,
                diffusion_cfg.horizon,
                mode,
                np.random.default_rng([seed, si, mi]),
                beta=preference_cfg.beta,
            )
            for ri, mu in enumerate(eval_cfg.regularizations):
                cell = dict(
                    gait=getattr(gait, "name", gait),
                    v_cmd=float(v_cmd),
                    pair_scale=float(scale),
                    pairs=n_pairs,
                    mode=mode,
                    regularization=float(mu),
                )
                try:
                    aligned, _ = align(
                        net,
                        pairs,
                        replace(align_cfg, regularization=mu),
                        np.random.default_rng([seed, si, mi, ri]),
                        stats=stats,
                        diffusion_cfg=diffusion_cfg,
                        progress=progress,
                    )
                except DivergenceError as e:
                    logger.warning("Ablation cell %s diverged: %s", cell, e)
                    rows.append(
                        dict(cell, stability_pct=0.0, mean_velocity=np.nan, diverged=True)
                    )
                    continue
                planner = DiffusionPlanner(aligned, stats, diffusion_cfg, env, source="aligned")
                report = evaluate(
                    planner,
                    gait,
                    v_cmd,
                    eval_cfg.episodes,
                    eval_cfg.seeds,
                    env=env,
                    disturbance=eval_cfg.disturbance,
                    workers=eval_cfg.workers,
                )
                logger.info("Ablation %s: stability %.1f %%", cell, report.stability_mean)
                rows.append(
                    dict(
                        cell,
                        stability_pct=report.stability_mean,
                        mean_velocity=report.velocity_mean,
                        diverged=False,
                    )
                )
    return with_weak_strong_gap(pd.DataFrame(rows))


def with_weak_strong_gap(table):
    """Add the stability difference of weak and strong labels of otherwise equal cells"""
    key = ["gait", "v_cmd", "pair_scale", "regularization"]
    modes = set(table["mode"])
    if not {"weak", "strong"} <= modes:
        return table.assign(weak_strong_gap=np.nan)
    pivot = table.pivot_table(index=key, columns="mode", values="stability_pct")
    gap = (pivot["weak"] - pivot["strong"]).rename("weak_strong_gap").reset_index()
    return table.merge(gap, on=key, how="left")


def write_csv(table, path, fingerprint=None):
    """Write a table as CSV preceded by a ``# fingerprint: ...`` comment line"""
    with open(path, "w", newline="") as f:
        f.write(f"# fingerprint: {fingerprint}\n")
        table.to_csv(f, index=False, lineterminator="\n")
    logger.debug("Wrote %d rows to %s", len(table), path)


def read_csv(path):
    """Read a table written by :func:`write_csv`

    Returns:
        tuple[pd.DataFrame, str | None]: The table and the embedded fingerprint
    """
    with open(path) as f:
        first = f.readline().strip()
    fingerprint = None
    if first.startswith("# fingerprint:"):
        fingerprint = first.split(":", 1)[1].strip()
        fingerprint = None if fingerprint == "None" else fingerprint
    return pd.read_csv(path, skiprows=1 if first.startswith("#") else 0), fingerprint


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
