"""Non-learning controllers and the action-matrix container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simcore import SimState, read_detectors
from ..tensor import masked_row_argmax


@dataclass
class ActionMatrix:
    values: np.ndarray  # (n, m) scores
    mask: np.ndarray  # (n, m) validity
    chosen: np.ndarray  # (n,) phase per intersection

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def greedy(cls, values, mask) -> "ActionMatrix":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.asarray(mask, bool), masked_row_argmax(values, mask))


def phase_mask(phase_counts, m: int | None = None) -> np.ndarray:
    phase_counts = np.asarray(phase_counts)
    m = int(phase_counts.max()) if m is None else m
    return np.arange(m)[None, :] < phase_counts[:, None]


def random_valid(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn valid column per row."""
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("a row has no valid phase")
    pick = np.floor(rng.random(mask.shape[0]) * counts).astype(np.int64)
    # k-th valid index per row
    csum = np.cumsum(mask, axis=1)
    return np.argmax(csum > pick[:, None], axis=1)


def act_random(mask, rng: np.random.Generator) -> ActionMatrix:
    mask = np.asarray(mask, bool)
    return ActionMatrix(np.zeros(mask.shape), mask, random_valid(mask, rng))


def act_fixed(clock: int, phase_durations, phase_counts) -> ActionMatrix:
    """Cycle 0, 1, ..., k-1 with a dwell of ``phase_durations`` steps per phase.

    ``phase_durations`` may be one integer or one per intersection.
    """
    phase_counts = np.asarray(phase_counts, dtype=np.int64)
    dwell = np.broadcast_to(np.asarray(phase_durations, dtype=np.int64), phase_counts.shape)
    if (dwell <= 0).any():
        raise ValueError("phase durations must be positive")
    chosen = (clock // dwell) % phase_counts
    mask = phase_mask(phase_counts)
    values = np.zeros(mask.shape)
    values[np.arange(len(chosen)), chosen] = 1.0
    return ActionMatrix(values, mask, chosen)


def auction_scores(state: SimState, normalizer: float = 10.0) -> np.ndarray:
    """Bid of every phase: sum over its green lanes of count + waiting sum / normalizer."""
    counts, sums = read_detectors(state)
    bid = counts + sums / normalizer
    ctrl = state.lane_ctrl
    scores = np.zeros((state.network.n_intersections, state.phase_mask.shape[1]))
    np.add.at(scores, state.lane_node[ctrl], state.phase_mask[ctrl] * bid[ctrl, None])
    return scores


def act_auction_nash(state: SimState, probes: int, rng: np.random.Generator,
                     normalizer: float = 10.0) -> ActionMatrix:
    """Next-ascent stochastic hill climbing over joint phases, starting from the commanded ones.

    Each probe flips one random intersection to a random other phase and keeps
    the flip if the joint bid strictly improves.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    scores = auction_scores(state, normalizer)
    counts = state.phase_count
    mask = phase_mask(counts, scores.shape[1])
    chosen = state.commanded_phases().copy()
    n = len(chosen)
    for _ in range(probes):
        i = int(rng.integers(n))
        p = int(rng.integers(counts[i] - 1))
        if p >= chosen[i]:
            p += 1
        # joint score is separable, so the change is local to i
        if scores[i, p] > scores[i, chosen[i]]:
            chosen[i] = p
    return ActionMatrix(np.where(mask, scores, 0.0), mask, chosen)
