#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Preference labels for planner segments

Weak labels need no reward: every (state, action) record of a segment is scored by its
normalized distance to the closest record of the best expert trajectory, and the
segment with the higher cumulative value wins. Strong labels compare cumulative
environment rewards instead.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-05"


import logging
import types
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .datasets import extract_segment, normalize, read_jsonl, segment_slots, write_jsonl
from .errors import ArtifactError
from .gaitsim import ACTION_DIM, evaluate_reward
from .util import val


logger = logging.getLogger(__name__)

PAIRS_SCHEMA = "prefdiff.pairs"
PAIRS_VERSION = 1
LABEL_MODES = ("weak", "strong")


@dataclass(frozen=True)
class PreferenceConfig:
    """Labeling settings

    Attributes:
        beta (float): Distance scale of the weak value, v = exp(-β d / |A|)
        pairs (int): Base number of labeled pairs per gait
        mode (str): ``weak`` (nearest expert distance) or ``strong`` (reward)
    """

    beta: float = 0.5
    pairs: int = 1024
    mode: str = "weak"


class ExpertIndex:
    """Exact nearest-neighbor search over the records of one expert trajectory

    Points are the normalized (state, action) rows. The index is immutable, so
    concurrent queries are safe.

    Args:
        points (np.ndarray): Normalized joint rows (N, STATE_DIM + ACTION_DIM)
        stats (NormStats): Statistics the points were normalized with
    """

    def __init__(self, points, stats):
        points = np.array(points, dtype=float, ndmin=2)
        if len(points) == 0:
            raise ValueError("Cannot build an expert index without points")
        self.points = points
        self.points.setflags(write=False)
        self.stats = stats
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def query(self, x):
        """Closest indexed point

        The tree only locates the neighbor, the returned distance is evaluated directly
        from the coordinates.

        Args:
            x (np.ndarray): Normalized joint row(s) (..., STATE_DIM + ACTION_DIM)

        Returns:
            tuple[np.ndarray, np.ndarray]: Euclidean distances and indices of the neighbors
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.points.shape[1]:
            raise ValueError(
                f"Query of dimension {x.shape[-1]} for an index of dimension "
                f"{self.points.shape[1]}"
            )
        _, idx = self._tree.query(x, k=1, eps=0)
        distance = np.sqrt(np.sum((self.points[idx] - x) ** 2, axis=-1))
        return distance, idx


def select_optimal_expert(expert_trajs):
    """Expert trajectory with the highest cumulative reward (the first one on ties)

    Raises:
        ValueError: for an empty list
    """
    if len(expert_trajs) == 0:
        raise ValueError("Cannot select the optimal expert from an empty list")
    returns = [evaluate_reward(t) for t in expert_trajs]
    return expert_trajs[int(np.argmax(returns))]


def build_index(optimal, stats):
    """Index all records of a trajectory in normalized (state, action) space

    Args:
        optimal (Trajectory): The optimal expert trajectory
        stats (NormStats): Normalization statistics of the run

    Returns:
        ExpertIndex: One point per time step
    """
    if len(optimal) == 0:
        raise ValueError("Cannot index an empty trajectory")
    joint = np.concatenate([optimal.states, optimal.actions], axis=1)
    return ExpertIndex(normalize(joint, stats), stats)


def distance_value(distance, beta, action_dim=ACTION_DIM):
    """Map a nearest-neighbor distance to a value in (0, 1]"""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return np.exp(-beta * np.asarray(distance, dtype=float) / action_dim)


def value(index, s, a, beta=0.5, action_dim=ACTION_DIM):
    """Weak value of raw (state, action) records

    Args:
        index (ExpertIndex): Optimal expert index
        s (np.ndarray): States (STATE_DIM,) or (n, STATE_DIM)
        a (np.ndarray): Actions (ACTION_DIM,) or (n, ACTION_DIM)
        beta (float): Distance scale
        action_dim (int): Dimension of the action space

    Returns:
        np.ndarray: Values exp(-β d / action_dim) in (0, 1]
    """
    joint = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)], axis=-1)
    distance, _ = index.query(normalize(joint, index.stats))
    return distance_value(distance, beta, action_dim)


def segment_values(segment, index, beta=0.5):
    """Per-step weak values of a segment"""
    return value(index, segment.states, segment.actions, beta)


@dataclass
class PreferencePair:
    """Two labeled segments of equal length

    Attributes:
        winner (Segment): Preferred segment
        loser (Segment): Other segment
        margin (float): Difference of cumulative value (weak) or reward (strong), >= 0
        provenance (str): ``weak`` or ``strong``
        tie (bool): True if the scores were equal and the winner was drawn at random
    """

    winner: object
    loser: object
    margin: float
    provenance: str
    tie: bool = False


def _check_lengths(sigma1, sigma2):
    if len(sigma1) != len(sigma2):
        raise ValueError(f"Segments differ in length: {len(sigma1)} vs {len(sigma2)}")


def _decide(sigma1, sigma2, score1, score2, provenance, rng):
    margin = abs(score1 - score2)
    if score1 > score2:
        return PreferencePair(sigma1, sigma2, margin, provenance)
    if score2 > score1:
        return PreferencePair(sigma2, sigma1, margin, provenance)
    if rng.random() < 0.5:
        return PreferencePair(sigma1, sigma2, 0.0, provenance, tie=True)
    return PreferencePair(sigma2, sigma1, 0.0, provenance, tie=True)


def label_pair_weak(sigma1, sigma2, index, beta, rng):
    """Label a pair by cumulative weak value

    Args:
        sigma1 (Segment): First segment
        sigma2 (Segment): Second segment of the same length
        index (ExpertIndex): Optimal expert index
        beta (float): Distance scale
        rng (np.random.Generator): Decides exact ties

    Returns:
        PreferencePair: Pair with provenance ``weak``
    """
    _check_lengths(sigma1, sigma2)
    score1 = float(np.sum(segment_values(sigma1, index, beta)))
    score2 = float(np.sum(segment_values(sigma2, index, beta)))
    return _decide(sigma1, sigma2, score1, score2, "weak", rng)


def label_pair_strong(sigma1, sigma2, rng):
    """Label a pair by cumulative reward

    Raises:
        ValueError: if a segment carries no rewards or the lengths differ
    """
    _check_lengths(sigma1, sigma2)
    for sigma in (sigma1, sigma2):
        rewards = getattr(sigma, "rewards", None)
        if rewards is None or len(rewards) != len(sigma):
            raise ValueError(f"Segment {getattr(sigma, 'origin', '?')} carries no rewards")
    return _decide(
        sigma1, sigma2, evaluate_reward(sigma1), evaluate_reward(sigma2), "strong", rng
    )


def bt_probability(score_plus, score_minus):
    """Bradley-Terry probability that the first item is preferred

    p = sigmoid(score_plus - score_minus). The two orders of the same pair sum to 1
    exactly.
    """
    d = np.asarray(score_plus, dtype=float) - np.asarray(score_minus, dtype=float)
    if np.any(np.isnan(d)):
        raise ValueError("Bradley-Terry scores must not be NaN")
    p = expit(np.abs(d))
    return val(np.where(d >= 0, p, 1 - p))


def build_preference_dataset(planner_trajs, index, pairs, h, mode, rng, *, beta=0.5):
    """Sample and label segment pairs from planner rollouts

    Segments are drawn without replacement from a shuffled pool of all valid
    (trajectory, start) slots. The pool is reshuffled once it cannot supply another pair.

    Args:
        planner_trajs (list[Trajectory]): Planner rollouts
        index (ExpertIndex | None): Optimal expert index, required for weak labels
        pairs (int): Number of pairs
        h (int): Horizon, segments have h + 1 records
        mode (str): ``weak`` or ``strong``
        rng (np.random.Generator): Random generator (pool order and ties)
        beta (float): Distance scale of weak labels

    Returns:
        list[PreferencePair]: Labeled pairs

    Raises:
        ValueError: if the pool holds less than two segments or the mode is unknown
    """
    if mode not in LABEL_MODES:
        raise ValueError(f"Unknown label mode `{mode}`, expected one of {LABEL_MODES}")
    if mode == "weak" and index is None:
        raise ValueError("Weak labels need an expert index")
    slots = segment_slots(planner_trajs, h)
    if len(slots) < 2:
        raise ValueError(
            f"Need at least 2 segments of {h + 1} records for a pair, found {len(slots)}"
        )

    result = []
    order, pos = rng.permutation(len(slots)), 0
    for _ in range(pairs):
        if pos + 2 > len(order):
            order, pos = rng.permutation(len(slots)), 0
        sigma1, sigma2 = (
            extract_segment(planner_trajs, *slots[order[i]], h) for i in (pos, pos + 1)
        )
        pos += 2
        if mode == "weak":
            result.append(label_pair_weak(sigma1, sigma2, index, beta, rng))
        else:
            result.append(label_pair_strong(sigma1, sigma2, rng))

    ties = sum(p.tie for p in result)
    logger.info(
        "Labeled %d %s pairs from %d segments (%d ties)", len(result), mode, len(slots), ties
    )
    return result


def label_agreement(pairs, rng):
    """Fraction of pairs whose reward-based label agrees with the given winner

    Args:
        pairs (list[PreferencePair]): Labeled pairs (typically weak)
        rng (np.random.Generator): Decides ties of the reward label

    Returns:
        float: Agreement rate in [0, 1]
    """
    if not pairs:
        raise ValueError("Agreement rate of an empty pair set")
    agree = 0
    for p in pairs:
        strong = label_pair_strong(p.winner, p.loser, rng)
        agree += strong.winner is p.winner
    return agree / len(pairs)


def save_pairs(pairs, path, fingerprint=None):
    """Write pairs as JSON lines of segment origins, margins and provenance

    The segments themselves are not stored, :func:`load_pairs` cuts them again out of
    the planner dataset the pairs were drawn from.
    """
    records = [
        dict(
            winner=list(p.winner.origin),
            loser=list(p.loser.origin),
            horizon=len(p.winner) - 1,
            margin=float(p.margin),
            provenance=p.provenance,
            tie=bool(p.tie),
        )
        for p in pairs
    ]
    write_jsonl(path, PAIRS_SCHEMA, PAIRS_VERSION, records, fingerprint)
    logger.debug("Wrote %d pairs to %s", len(pairs), path)


def load_pairs(path, planner_trajs):
    """Read pairs written by :func:`save_pairs`

    Args:
        path (str | Path): Pair file
        planner_trajs (list[Trajectory]): The planner dataset the pairs refer to

    Returns:
        list[PreferencePair]: The pairs with their segments

    Raises:
        ArtifactError: on a corrupt file or origins outside the planner dataset
    """
    _, records = read_jsonl(path, PAIRS_SCHEMA, PAIRS_VERSION)
    pairs = []
    for r in records:
        try:
            winner = extract_segment(planner_trajs, *r["winner"], r["horizon"])
            loser = extract_segment(planner_trajs, *r["loser"], r["horizon"])
        except (IndexError, ValueError) as e:
            raise ArtifactError(f"{path}: pair does not match the planner dataset: {e}") from e
        pairs.append(PreferencePair(winner, loser, r["margin"], r["provenance"], r["tie"]))
    return pairs


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
