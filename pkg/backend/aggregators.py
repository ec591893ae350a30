"""
Vote aggregation for PATE: plain GNMax, the Confident-GNMax consensus gate,
and the vote-count construction of the personalized variants
(upsampling, vanishing, weighting).
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from errors import InvalidParameterError, InvalidVoteError

ABSTAIN = -1


class Variant(str, Enum):
    PLAIN = "plain"
    CONFIDENT = "confident"
    UPSAMPLING = "upsampling"
    VANISHING = "vanishing"
    WEIGHTING = "weighting"

    @property
    def personalized(self) -> bool:
        return self in (Variant.UPSAMPLING, Variant.VANISHING, Variant.WEIGHTING)

    @property
    def gated(self) -> bool:
        return self is not Variant.PLAIN


@dataclass(frozen=True)
class VotingConfig:
    k: int = 250
    sigma1: float = 150.0
    sigma2: float = 40.0
    threshold: float = 200.0
    delta: float = 1e-5
    num_classes: int = 10
    label_cap: int = 2000

    def __post_init__(self):
        if self.k < 1:
            raise InvalidParameterError(f"need at least one teacher, got k={self.k}")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise InvalidParameterError("sigma1 and sigma2 must be positive")
        if self.threshold <= 0:
            raise InvalidParameterError("threshold T must be positive")
        if not (0 < self.delta <= 1):
            raise InvalidParameterError(f"delta must lie in (0, 1], got {self.delta}")
        if self.num_classes < 1:
            raise InvalidParameterError("num_classes must be positive")
        if self.label_cap < 0:
            raise InvalidParameterError("label_cap must be nonnegative")


@dataclass(frozen=True)
class TeacherAssignment:
    teacher_id: int
    group_id: str
    weight: float = 1.0
    participation: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidParameterError(f"teacher {self.teacher_id}: weight must be positive")
        if not (0 < self.participation <= 1):
            raise InvalidParameterError(f"teacher {self.teacher_id}: participation must lie in (0, 1]")


class VoteVector:
    """Per-class (possibly weighted) vote counts for one query."""

    __slots__ = ("counts",)

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 1 or counts.size == 0:
            raise InvalidVoteError("a vote vector needs at least one class")
        if np.any(~np.isfinite(counts)) or np.any(counts < 0):
            raise InvalidVoteError("vote counts must be finite and nonnegative")
        self.counts = counts

    @property
    def num_classes(self) -> int:
        return self.counts.size

    def plurality(self) -> int:
        return int(np.argmax(self.counts))

    def __repr__(self) -> str:
        return f"VoteVector({self.counts.tolist()})"


def teacher_weights(assignments: Sequence[TeacherAssignment], k: int) -> np.ndarray:
    """Weights indexed by teacher id; every teacher in 0..k-1 must be assigned once."""
    weights = np.full(k, np.nan)
    for a in assignments:
        if not (0 <= a.teacher_id < k):
            raise InvalidParameterError(f"teacher id {a.teacher_id} outside 0..{k - 1}")
        weights[a.teacher_id] = a.weight
    if np.any(np.isnan(weights)):
        missing = np.flatnonzero(np.isnan(weights))[:5].tolist()
        raise InvalidParameterError(f"teachers without an assignment, e.g. {missing}")
    return weights


def tally(raw_votes, num_classes: int, weights: Optional[np.ndarray] = None,
          active: Optional[np.ndarray] = None) -> np.ndarray:
    """Sum of (weighted) votes per class over voting teachers."""
    raw = np.asarray(raw_votes)
    if raw.ndim != 1:
        raise InvalidVoteError("raw votes must be one class index per teacher")
    if np.any((raw < ABSTAIN) | (raw >= num_classes)):
        bad = raw[(raw < ABSTAIN) | (raw >= num_classes)][0]
        raise InvalidVoteError(f"class index {bad} outside 0..{num_classes - 1}")

    voting = raw != ABSTAIN
    if active is not None:
        voting &= np.asarray(active, dtype=bool)

    if weights is None:
        counts = np.bincount(raw[voting], minlength=num_classes)
    else:
        counts = np.bincount(raw[voting], weights=weights[voting], minlength=num_classes)
    return counts.astype(float)


def build_vote_vector(raw_votes, assignments: Sequence[TeacherAssignment], variant: Variant,
                      num_classes: int, active_set=None, weights: Optional[np.ndarray] = None) -> VoteVector:
    """
    Vote count of one query for the given aggregator.

    Vanishing counts only teachers flagged in active_set, weighting sums the
    teachers' weights, every other variant counts one per vote. Callers
    tallying many queries pass weights = teacher_weights(assignments, k) once.
    """
    variant = Variant(variant)
    raw = np.asarray(raw_votes)
    active = None
    if variant is not Variant.WEIGHTING:
        weights = None
    elif weights is None:
        weights = teacher_weights(assignments, raw.size)
    elif np.shape(weights) != raw.shape:
        raise InvalidParameterError("weights must give one value per teacher")
    if variant is Variant.VANISHING and active_set is not None:
        active = np.asarray(active_set, dtype=bool)
        if active.shape != raw.shape:
            raise InvalidParameterError("active set must flag every teacher")
    return VoteVector(tally(raw, num_classes, weights, active))


def _counts(votes) -> np.ndarray:
    return votes.counts if isinstance(votes, VoteVector) else np.asarray(votes, dtype=float)


def gnmax(votes, sigma2: float, rng: np.random.Generator) -> int:
    """Gaussian NoisyMax: argmax of counts plus independent N(0, sigma2²) per class."""
    if sigma2 <= 0:
        raise InvalidParameterError("sigma2 must be positive")
    counts = _counts(votes)
    noisy = counts + rng.normal(0.0, sigma2, size=counts.size)
    return int(np.argmax(noisy))


def confident_gate(votes, sigma1: float, threshold: float, rng: np.random.Generator) -> bool:
    """Consensus check: max count plus N(0, sigma1²) must reach the threshold."""
    if sigma1 <= 0:
        raise InvalidParameterError("sigma1 must be positive")
    counts = _counts(votes)
    return bool(counts.max() + rng.normal(0.0, sigma1) >= threshold)


def plurality(votes) -> int:
    """Noise-free argmax; ties go to the smallest class index."""
    return int(np.argmax(_counts(votes)))
