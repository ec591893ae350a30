"""
Teacher votes without model training: synthetic ensembles parameterised by
per-teacher accuracy, and the vote-matrix text file for votes produced by
real teachers elsewhere.

File format:
    classes=<m>,teachers=<k>
    <c_1>,<c_2>,...,<c_k>[,gt=<c>]      one row per query, '-' = abstain
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from aggregators import ABSTAIN
from atomic_files import atomic_write
from errors import DimensionMismatchError, InvalidParameterError, VoteFileParseError
from run_logging import get_logger

logger = get_logger("teacher_simulator")

ABSTAIN_TOKEN = "-"
GT_PREFIX = "gt="


@dataclass(frozen=True)
class SyntheticEnsemble:
    """
    Teachers that vote the true class with their accuracy and a wrong class
    otherwise. On a hard query (probability hard_query_rate) every teacher
    votes uniformly over all classes.
    """

    accuracies: np.ndarray
    num_classes: int
    hard_query_rate: float = 0.0
    confusion: Optional[np.ndarray] = None

    def __post_init__(self):
        acc = np.asarray(self.accuracies, dtype=float)
        object.__setattr__(self, "accuracies", acc)
        if acc.ndim != 1 or acc.size == 0:
            raise InvalidParameterError("need at least one teacher accuracy")
        if self.num_classes < 2:
            raise InvalidParameterError("synthetic teachers need at least two classes")
        if np.any(acc < 1.0 / self.num_classes - 1e-12) or np.any(acc > 1):
            raise InvalidParameterError(f"accuracies must lie in [1/{self.num_classes}, 1]")
        if not (0 <= self.hard_query_rate <= 1):
            raise InvalidParameterError("hard_query_rate must lie in [0, 1]")
        if self.confusion is not None:
            conf = np.asarray(self.confusion, dtype=float)
            if conf.shape != (self.num_classes, self.num_classes) or np.any(conf < 0):
                raise InvalidParameterError("confusion must be a nonnegative m x m matrix")
            off = conf * (1 - np.eye(self.num_classes))
            if np.any(off.sum(axis=1) <= 0):
                raise InvalidParameterError("every confusion row needs weight on some wrong class")
            object.__setattr__(self, "confusion", off / off.sum(axis=1, keepdims=True))

    @classmethod
    def uniform(cls, k: int, accuracy: float, num_classes: int, hard_query_rate: float = 0.0) -> "SyntheticEnsemble":
        return cls(np.full(k, float(accuracy)), num_classes, hard_query_rate)

    @property
    def k(self) -> int:
        return self.accuracies.size


@dataclass(frozen=True)
class VoteMatrix:
    votes: np.ndarray
    num_classes: int
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        votes = np.asarray(self.votes, dtype=np.int64)
        object.__setattr__(self, "votes", votes)
        if votes.ndim != 2:
            raise InvalidParameterError("a vote matrix is queries x teachers")
        if np.any((votes < ABSTAIN) | (votes >= self.num_classes)):
            raise InvalidParameterError(f"vote entries must be classes 0..{self.num_classes - 1} or abstain")
        if self.ground_truth is not None:
            gt = np.asarray(self.ground_truth, dtype=np.int64)
            object.__setattr__(self, "ground_truth", gt)
            if gt.shape != (votes.shape[0],):
                raise DimensionMismatchError("ground truth needs one class per query")
            if np.any((gt < 0) | (gt >= self.num_classes)):
                raise InvalidParameterError("ground-truth classes out of range")

    @property
    def num_queries(self) -> int:
        return self.votes.shape[0]

    @property
    def num_teachers(self) -> int:
        return self.votes.shape[1]

    def take(self, rows) -> "VoteMatrix":
        gt = None if self.ground_truth is None else self.ground_truth[rows]
        return VoteMatrix(self.votes[rows], self.num_classes, gt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoteMatrix):
            return NotImplemented
        if self.num_classes != other.num_classes or not np.array_equal(self.votes, other.votes):
            return False
        if self.ground_truth is None or other.ground_truth is None:
            return self.ground_truth is None and other.ground_truth is None
        return np.array_equal(self.ground_truth, other.ground_truth)


# === 1. Synthetic votes ===

def sample_ground_truth(num_queries: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, num_classes, size=num_queries)


def sample_votes(ensemble: SyntheticEnsemble, ground_truth, rng: np.random.Generator) -> VoteMatrix:
    """One vote per (query, teacher), independent given the seed."""
    gt = np.asarray(ground_truth, dtype=np.int64)
    m = ensemble.num_classes
    shape = (gt.size, ensemble.k)

    correct = rng.random(shape) < ensemble.accuracies[None, :]
    if ensemble.confusion is None:
        wrong = (gt[:, None] + rng.integers(1, m, size=shape)) % m
    else:
        cdf = np.cumsum(ensemble.confusion[gt], axis=1)
        draws = rng.random(shape)
        wrong = np.minimum((draws[:, :, None] > cdf[:, None, :]).sum(axis=2), m - 1)
    votes = np.where(correct, gt[:, None], wrong)

    hard = rng.random(gt.size) < ensemble.hard_query_rate
    guesses = rng.integers(0, m, size=shape)
    votes = np.where(hard[:, None], guesses, votes)
    return VoteMatrix(votes, m, gt)


def expand_for_upsampling(ensemble: SyntheticEnsemble, k: int) -> SyntheticEnsemble:
    """Ensemble grown to k teachers at unchanged accuracy (duplicated data trains more teachers)."""
    if k < 1:
        raise InvalidParameterError("need at least one teacher")
    acc = np.resize(ensemble.accuracies, k)
    return SyntheticEnsemble(acc, ensemble.num_classes, ensemble.hard_query_rate, ensemble.confusion)


def plurality_votes(matrix: VoteMatrix) -> np.ndarray:
    """Noise-free plurality class per query; abstentions ignored, ties to the smaller class."""
    counts = np.zeros((matrix.num_queries, matrix.num_classes), dtype=np.int64)
    rows, cols = np.nonzero(matrix.votes != ABSTAIN)
    np.add.at(counts, (rows, matrix.votes[rows, cols]), 1)
    return counts.argmax(axis=1)


def plurality_accuracy(matrix: VoteMatrix) -> float:
    if matrix.ground_truth is None:
        raise InvalidParameterError("voting accuracy needs ground truth")
    return float(np.mean(plurality_votes(matrix) == matrix.ground_truth))


# === 2. Calibration ===

def _simulated_accuracy(k, num_classes, accuracy, hard_query_rate, num_queries, seed) -> float:
    rng = np.random.default_rng(seed)
    gt = sample_ground_truth(num_queries, num_classes, rng)
    ensemble = SyntheticEnsemble.uniform(k, accuracy, num_classes, hard_query_rate)
    return plurality_accuracy(sample_votes(ensemble, gt, rng))


def _bisect(measure, lo: float, hi: float, target: float, increasing: bool, iterations: int) -> float:
    for _ in range(iterations):
        mid = (lo + hi) / 2
        below = measure(mid) < target
        if below == increasing:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def calibrate_accuracy(k: int, num_classes: int, target: float = 0.977, num_queries: int = 4000,
                       seed: int = 0, hard_query_rate: float = 0.0, iterations: int = 30) -> float:
    """Per-teacher accuracy whose simulated plurality accuracy reaches the target."""
    if not (0 < target <= 1):
        raise InvalidParameterError("target accuracy must lie in (0, 1]")

    def measure(acc):
        return _simulated_accuracy(k, num_classes, acc, hard_query_rate, num_queries, seed)

    found = _bisect(measure, 1.0 / num_classes, 1.0, target, increasing=True, iterations=iterations)
    logger.info(f"📊 calibrated teacher accuracy {found:.4f} for plurality accuracy {target:.3f} (k={k})")
    return found


def calibrate_hard_query_rate(k: int, num_classes: int, accuracy: float, target: float = 0.977,
                              num_queries: int = 4000, seed: int = 0, iterations: int = 30) -> float:
    """Hard-query rate at fixed teacher accuracy whose plurality accuracy reaches the target."""
    if not (0 < target <= 1):
        raise InvalidParameterError("target accuracy must lie in (0, 1]")

    def measure(rate):
        return _simulated_accuracy(k, num_classes, accuracy, rate, num_queries, seed)

    found = _bisect(measure, 0.0, 1.0, target, increasing=False, iterations=iterations)
    logger.info(f"📊 calibrated hard-query rate {found:.4f} at teacher accuracy {accuracy:.3f}")
    return found


# === 3. Vote-matrix files ===

def write_votes(matrix: VoteMatrix, path: str) -> str:
    """Write the matrix in the vote-matrix text format, atomically."""
    def write(f):
        f.write(f"classes={matrix.num_classes},teachers={matrix.num_teachers}\n")
        for i, row in enumerate(matrix.votes):
            tokens = [ABSTAIN_TOKEN if v == ABSTAIN else str(v) for v in row.tolist()]
            if matrix.ground_truth is not None:
                tokens.append(f"{GT_PREFIX}{int(matrix.ground_truth[i])}")
            f.write(",".join(tokens) + "\n")

    atomic_write(path, write)
    logger.info(f"💾 vote matrix {matrix.num_queries}x{matrix.num_teachers} written: {path}")
    return path


def _parse_header(line: str):
    try:
        fields = dict(part.split("=", 1) for part in line.strip().split(","))
        return int(fields["classes"]), int(fields["teachers"])
    except (ValueError, KeyError):
        raise VoteFileParseError(f"expected header 'classes=<m>,teachers=<k>', got {line.strip()!r}", 1)


def _parse_class(token: str, num_classes: int, line_number: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise VoteFileParseError(f"not a class index: {token!r}", line_number)
    if not (0 <= value < num_classes):
        raise VoteFileParseError(f"class {value} outside 0..{num_classes - 1}", line_number)
    return value


def load_votes(path: str) -> VoteMatrix:
    """Parse a vote-matrix file; malformed rows raise VoteFileParseError with the line number."""
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        if not header:
            raise VoteFileParseError("empty file", 1)
        num_classes, num_teachers = _parse_header(header)
        if num_classes < 1 or num_teachers < 1:
            raise VoteFileParseError("header needs positive classes and teachers", 1)

        rows, truth = [], []
        for line_number, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            gt = None
            if tokens[-1].startswith(GT_PREFIX):
                gt = _parse_class(tokens.pop()[len(GT_PREFIX):], num_classes, line_number)
            if len(tokens) != num_teachers:
                raise VoteFileParseError(f"expected {num_teachers} votes, found {len(tokens)}", line_number)
            if truth and (gt is None) != (truth[0] is None):
                raise VoteFileParseError("ground truth must be given on every row or on none", line_number)
            rows.append([ABSTAIN if t == ABSTAIN_TOKEN else _parse_class(t, num_classes, line_number)
                         for t in tokens])
            truth.append(gt)

    votes = np.array(rows, dtype=np.int64).reshape(len(rows), num_teachers)
    gt = None if not truth or truth[0] is None else np.array(truth, dtype=np.int64)
    logger.info(f"📥 loaded {votes.shape[0]} queries x {num_teachers} teachers from {path}")
    return VoteMatrix(votes, num_classes, gt)
