#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Trajectory datasets

Collection of expert and planner rollouts, Gaussian feature normalization,
horizon-length segment sampling and the versioned JSON-lines file format.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-02"


import json
import logging
import types
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError
from .gaitsim import ACTION_DIM, ACTION_FEATURES, STATE_DIM, STATE_FEATURES, ExpertPolicy


logger = logging.getLogger(__name__)

DATASET_SCHEMA = "prefdiff.trajectories"
DATASET_VERSION = 1
STATS_SCHEMA = "prefdiff.norm_stats"
STATS_VERSION = 1
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset sizes

    Attributes:
        expert_episodes (int): Expert episodes per gait, split evenly across the commanded speeds
        planner_episodes (int): Planner rollouts per gait for the preference data, split like
            the expert episodes
        max_steps (int): Step budget per episode
        workers (int): Threads simulating episodes concurrently
    """

    expert_episodes: int = 256
    planner_episodes: int = 64
    max_steps: int = 250
    workers: int = 1


@dataclass
class Trajectory:
    """One episode of (state, action, reward, done) records

    ``states[t]`` is the state the action ``actions[t]`` was applied in, ``rewards[t]`` and
    ``dones[t]`` are the outcome of that step.

    Attributes:
        states (np.ndarray): Shape (T, STATE_DIM)
        actions (np.ndarray): Shape (T, ACTION_DIM)
        rewards (np.ndarray): Shape (T,)
        dones (np.ndarray): Shape (T,), at most the final entry is True
        meta (dict): gait, v_cmd, seed, episode, source (expert | planner) and fell
    """

    states: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    rewards: np.ndarray = field(repr=False)
    dones: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, ACTION_DIM)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        T = len(self.states)
        if not len(self.actions) == len(self.rewards) == len(self.dones) == T:
            raise ValueError(
                f"Trajectory arrays differ in length: states {T}, actions {len(self.actions)}, "
                f"rewards {len(self.rewards)}, dones {len(self.dones)}"
            )
        if np.any(self.dones[:-1]):
            raise ValueError("Only the final record of a trajectory may be done")

    def __len__(self):
        return len(self.states)

    def __getitem__(self, key):
        """Column access by feature name, e.g. ``traj["v"]`` or ``traj["a_fl"]``"""
        if key in STATE_FEATURES:
            return self.states[:, STATE_FEATURES.index(key)]
        if key in ACTION_FEATURES:
            return self.actions[:, ACTION_FEATURES.index(key)]
        if key in ("reward", "rewards"):
            return self.rewards
        if key == "step":
            return np.arange(len(self))
        raise KeyError(key)

    @property
    def fell(self):
        return bool(self.meta.get("fell", False))


@dataclass
class NormStats:
    """Per-feature Gaussian normalization statistics"""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def select(self, dim):
        """Return (mean, std) for vectors of the given trailing dimension

        Args:
            dim (int): STATE_DIM, ACTION_DIM or their sum for joint (s, a) rows
        """
        if dim == STATE_DIM:
            return self.state_mean, self.state_std
        if dim == ACTION_DIM:
            return self.action_mean, self.action_std
        if dim == STATE_DIM + ACTION_DIM:
            return (
                np.concatenate([self.state_mean, self.action_mean]),
                np.concatenate([self.state_std, self.action_std]),
            )
        raise ValueError(
            f"Cannot normalize vectors of length {dim}, expected {STATE_DIM} (state), "
            f"{ACTION_DIM} (action) or {STATE_DIM + ACTION_DIM} (joint)"
        )

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.array(d[k], dtype=float) for k in cls.__dataclass_fields__})


@dataclass
class Segment:
    """Contiguous slice of ``h + 1`` records of a trajectory

    Attributes:
        states (np.ndarray): Shape (h+1, STATE_DIM)
        actions (np.ndarray): Shape (h+1, ACTION_DIM)
        rewards (np.ndarray): Shape (h+1,)
        dones (np.ndarray): Shape (h+1,)
        origin (tuple[int, int]): (trajectory index, start index)
    """

    states: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    rewards: np.ndarray = field(repr=False)
    dones: np.ndarray = field(repr=False)
    origin: tuple

    def __len__(self):
        return len(self.states)


def collect(
    policy, gait, v_cmd, episodes, max_steps, seed, *, env=None, workers=1, disturbance=None
):
    """Roll out a policy for a number of episodes

    Episode ``i`` is seeded from ``(seed, i)``, so the result does not depend on
    the number of workers.

    Args:
        policy (str | callable): ``"expert"`` or a planner policy
        gait (GaitTemplate | str): Gait template
        v_cmd (float): Commanded velocity in m/s
        episodes (int): Number of episodes (>= 1)
        max_steps (int): Step budget per episode
        seed (int): Run seed
        env (EnvConstants | None): Simulator constants
        workers (int): Number of threads simulating episodes concurrently
        disturbance (float | None): Half-width of the velocity kicks, defaults to the simulator's

    Returns:
        list[Trajectory]: One trajectory per episode, truncated at the first fall
    """
    # evalharness builds on the types of this module
    from .evalharness import rollout_episode

    if episodes < 1:
        raise ValueError(f"Need at least one episode, got episodes={episodes}")
    if isinstance(policy, str) and policy == "expert":
        policy = ExpertPolicy(gait, env)

    def run(i):
        return rollout_episode(
            policy,
            gait,
            v_cmd,
            env=env,
            max_steps=max_steps,
            seed=seed,
            episode=i,
            disturbance=disturbance,
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trajs = list(pool.map(run, range(episodes)))
    else:
        trajs = [run(i) for i in range(episodes)]
    falls = sum(t.fell for t in trajs)
    logger.info(
        "Collected %d %s episodes (%s, v_cmd=%g), %d falls",
        episodes,
        getattr(policy, "source", "planner"),
        getattr(gait, "name", gait),
        v_cmd,
        falls,
    )
    return trajs


def fit_norm(trajs):
    """Fit per-feature mean and population standard deviation

    Args:
        trajs (list[Trajectory]): Trajectories to fit on

    Returns:
        NormStats: Statistics with std floored at 1e-6

    Raises:
        ValueError: if there is not a single record
    """
    states = [t.states for t in trajs if len(t)]
    if not states:
        raise ValueError("Cannot fit normalization statistics on an empty dataset")
    states = np.concatenate(states)
    actions = np.concatenate([t.actions for t in trajs if len(t)])

    def moments(x):
        mean = x.mean(axis=0)
        std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
        return mean, np.maximum(std, STD_FLOOR)

    return NormStats(*moments(states), *moments(actions))


def normalize(x, stats):
    """Map to zero mean and unit variance, z = (x - mean) / std

    Args:
        x (np.ndarray): States, actions or joint rows (trailing dimension selects which)
        stats (NormStats): Statistics

    Returns:
        np.ndarray: Normalized values
    """
    x = np.asarray(x, dtype=float)
    mean, std = stats.select(x.shape[-1])
    return (x - mean) / std


def denormalize(z, stats):
    """Inverse of :func:`normalize`"""
    z = np.asarray(z, dtype=float)
    mean, std = stats.select(z.shape[-1])
    return z * std + mean


def segment_slots(trajs, h):
    """All valid (trajectory, start) pairs for segments of h + 1 records

    A slot is valid if the segment lies within the trajectory and no record before
    its final one is done.

    Returns:
        np.ndarray: Integer array of shape (n, 2)
    """
    slots = []
    for i, t in enumerate(trajs):
        n = len(t) - h
        if n <= 0:
            continue
        starts = np.arange(n)
        if h > 0 and np.any(t.dones):
            # done before the final record of a segment
            blocked = np.convolve(t.dones[:-1].astype(int), np.ones(h, dtype=int))[h - 1 :]
            starts = starts[blocked[:n] == 0]
        slots.append(np.stack([np.full(len(starts), i), starts], axis=1))
    if not slots:
        return np.zeros((0, 2), dtype=int)
    return np.concatenate(slots).astype(int)


def extract_segment(trajs, traj_id, start, h):
    """Slice records ``start .. start + h`` out of a trajectory"""
    t = trajs[traj_id]
    if not (0 <= start and start + h < len(t)):
        raise ValueError(f"Segment {start}..{start + h} out of bounds of trajectory {traj_id}")
    sl = slice(start, start + h + 1)
    return Segment(
        t.states[sl], t.actions[sl], t.rewards[sl], t.dones[sl], (int(traj_id), int(start))
    )


def sample_segment(trajs, h, rng, slots=None):
    """Draw a segment uniformly among all valid (trajectory, start) pairs

    Args:
        trajs (list[Trajectory]): Source trajectories
        h (int): Horizon, the segment has h + 1 records
        rng (np.random.Generator): Random generator
        slots (np.ndarray | None): Precomputed :func:`segment_slots` to avoid recomputation

    Returns:
        Segment: The sampled segment

    Raises:
        ValueError: if no trajectory is long enough
    """
    if slots is None:
        slots = segment_slots(trajs, h)
    if len(slots) == 0:
        raise ValueError(f"No trajectory provides a segment of {h + 1} records")
    traj_id, start = slots[rng.integers(len(slots))]
    return extract_segment(trajs, traj_id, start, h)


def _crc(payload):
    return f"{zlib.crc32(payload):08x}"


def _trajectory_record(t):
    return dict(
        states=t.states.tolist(),
        actions=t.actions.tolist(),
        rewards=t.rewards.tolist(),
        dones=t.dones.tolist(),
        meta=t.meta,
    )


def save(trajs, path, fingerprint=None):
    """Write trajectories as JSON lines

    The first line is a header with schema, version, record count, config fingerprint
    and a CRC32 of the remaining bytes; every following line holds one trajectory.

    Args:
        trajs (list[Trajectory]): Trajectories to write
        path (str | Path): Output file
        fingerprint (str | None): Config fingerprint to embed
    """
    records = [_trajectory_record(t) for t in trajs]
    write_jsonl(path, DATASET_SCHEMA, DATASET_VERSION, records, fingerprint)
    logger.debug("Wrote %d trajectories to %s", len(trajs), path)


def read_header(path):
    """Return the header dict of a dataset or pair file"""
    with open(path, "rb") as f:
        line = f.readline()
    try:
        return json.loads(line)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: unreadable header: {e}") from e


def read_jsonl(path, schema, version):
    """Read and verify a JSON-lines artifact

    Returns:
        tuple[dict, list[dict]]: Header and records

    Raises:
        ArtifactError: On schema/version mismatch, truncation or checksum failure
    """
    data = Path(path).read_bytes()
    head, sep, payload = data.partition(b"\n")
    if not sep:
        raise ArtifactError(f"{path}: truncated file (no header line)")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: unreadable header: {e}") from e
    if header.get("schema") != schema or header.get("version") != version:
        raise ArtifactError(
            f"{path}: schema {header.get('schema')!r} version {header.get('version')!r}, "
            f"expected {schema!r} version {version}"
        )
    lines = payload.splitlines()
    if len(lines) != header["count"] or (payload and not payload.endswith(b"\n")):
        raise ArtifactError(
            f"{path}: truncated file, header announces {header['count']} records "
            f"but {len(lines)} were found"
        )
    if _crc(payload) != header["crc32"]:
        raise ArtifactError(f"{path}: checksum mismatch, the file is corrupted")
    return header, [json.loads(line) for line in lines]


def write_jsonl(path, schema, version, records, fingerprint=None):
    """Write JSON-serializable records in the checksummed JSON-lines layout"""
    payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode()
    header = dict(
        schema=schema,
        version=version,
        count=len(records),
        fingerprint=fingerprint,
        crc32=_crc(payload),
    )
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def load(path):
    """Read trajectories written by :func:`save`

    Args:
        path (str | Path): Dataset file

    Returns:
        list[Trajectory]: The trajectories (empty list for an empty dataset)

    Raises:
        ArtifactError: On version mismatch, truncated file or checksum failure
    """
    _, records = read_jsonl(path, DATASET_SCHEMA, DATASET_VERSION)
    return [
        Trajectory(r["states"], r["actions"], r["rewards"], r["dones"], r["meta"])
        for r in records
    ]


def save_stats(stats, path, fingerprint=None):
    """Write normalization statistics as JSON"""
    doc = dict(schema=STATS_SCHEMA, version=STATS_VERSION, fingerprint=fingerprint)
    doc.update(stats.to_dict())
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_stats(path):
    """Read normalization statistics written by :func:`save_stats`"""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or (doc.get("schema"), doc.get("version")) != (
        STATS_SCHEMA,
        STATS_VERSION,
    ):
        raise ArtifactError(f"{path}: not a version {STATS_VERSION} normalization file")
    return NormStats.from_dict(doc)


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
