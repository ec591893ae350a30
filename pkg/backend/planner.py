"""
Turn per-group privacy budgets into parameters of the personalized
aggregators: duplicate counts (upsampling), participation frequencies and
schedules (vanishing), and teacher weights (weighting).
"""

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from aggregators import TeacherAssignment, Variant, VotingConfig
from errors import InvalidParameterError, PlanInfeasibleError
from rdp_accountant import PrivacyBudget
from run_logging import get_logger

logger = get_logger("planner")

DEFAULT_DUPLICATE_CAP = 64
DEFAULT_PRECISION = 1e-6
DEFAULT_VANISHING_EXPONENT = 4.0
DEFAULT_RESHUFFLE_PERIOD = 50
MIXED_GROUP = "mixed"
SIGMA_SCALINGS = ("sqrt_active_fraction", "none")


@dataclass(frozen=True)
class GroupSpec:
    group_id: str
    budget: PrivacyBudget
    num_points: int
    param: float
    sensitivity: float

    def __post_init__(self):
        if self.num_points < 1:
            raise InvalidParameterError(f"group {self.group_id} has no data points")
        if self.param <= 0 or self.sensitivity <= 0:
            raise InvalidParameterError(f"group {self.group_id}: parameter and sensitivity must be positive")


@dataclass(frozen=True)
class PlanResult:
    variant: Variant
    groups: Tuple[GroupSpec, ...]
    scaled_config: VotingConfig
    upsampling_gain: float = 1.0
    assignments: Tuple[TeacherAssignment, ...] = field(default=())

    def group(self, group_id: str) -> GroupSpec:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def teacher_groups(self) -> Dict[str, np.ndarray]:
        """Teacher ids per group; empty for plans whose teachers see every group."""
        out = {}
        for g in self.groups:
            out[g.group_id] = np.array(
                sorted(a.teacher_id for a in self.assignments if a.group_id == g.group_id), dtype=int)
        return out

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "upsampling_gain": self.upsampling_gain,
            "scaled_config": asdict(self.scaled_config),
            "groups": [
                {
                    "group_id": g.group_id,
                    "epsilon": g.budget.epsilon,
                    "delta": g.budget.delta,
                    "num_points": g.num_points,
                    "param": g.param,
                    "sensitivity": g.sensitivity,
                }
                for g in self.groups
            ],
            "assignments": [asdict(a) for a in self.assignments],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlanResult":
        try:
            return cls(
                variant=Variant(data["variant"]),
                groups=tuple(
                    GroupSpec(
                        group_id=str(g["group_id"]),
                        budget=PrivacyBudget(float(g["epsilon"]), float(g["delta"])),
                        num_points=int(g["num_points"]),
                        param=float(g["param"]),
                        sensitivity=float(g["sensitivity"]),
                    )
                    for g in data["groups"]
                ),
                scaled_config=VotingConfig(**data["scaled_config"]),
                upsampling_gain=float(data["upsampling_gain"]),
                assignments=tuple(TeacherAssignment(**a) for a in data["assignments"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidParameterError(f"malformed plan: {e}") from e


def _check_budgets(budgets: Sequence[float]) -> np.ndarray:
    eps = np.asarray(budgets, dtype=float)
    if eps.ndim != 1 or eps.size == 0:
        raise InvalidParameterError("need at least one budget")
    if np.any(~np.isfinite(eps)) or np.any(eps <= 0):
        raise InvalidParameterError(f"budgets must be positive, got {eps.tolist()}")
    return eps


def split_counts(total: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder split of total into parts proportional to ratios."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or ratios.sum() <= 0:
        raise InvalidParameterError("ratios must be nonnegative with a positive sum")
    exact = total * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    remainder = total - counts.sum()
    for idx in np.argsort(-(exact - counts), kind="stable")[:remainder]:
        counts[idx] += 1
    return counts.tolist()


def _mixed_assignments(k: int) -> Tuple[TeacherAssignment, ...]:
    return tuple(TeacherAssignment(t, MIXED_GROUP) for t in range(k))


# === 1. Upsampling ===

def duplicate_counts(budgets: Sequence[float], precision: float = DEFAULT_PRECISION,
                     duplicate_cap: int = DEFAULT_DUPLICATE_CAP) -> List[int]:
    """
    Smallest integer duplicate counts whose ratios match the budget ratios
    within the relative precision.
    """
    eps = _check_budgets(budgets)
    if not (0 < precision < 0.5):
        raise InvalidParameterError(f"precision must lie in (0, 0.5), got {precision}")

    ratios = eps / eps.min()
    for base in range(1, duplicate_cap + 1):
        scaled = base * ratios
        dups = np.rint(scaled)
        if dups.max() > duplicate_cap:
            break
        if np.all(np.abs(scaled - dups) <= precision * scaled):
            return dups.astype(int).tolist()

    raise PlanInfeasibleError(
        f"budgets {eps.tolist()} need more than {duplicate_cap} duplicates at precision {precision}",
        remedy="loosen upsampling_precision, raise duplicate_cap, or use budgets that are near multiples of each other",
    )


def plan_upsampling(budgets: Sequence[Tuple[float, int]], precision: float = DEFAULT_PRECISION,
                    config: VotingConfig = VotingConfig(), duplicate_cap: int = DEFAULT_DUPLICATE_CAP,
                    delta: Optional[float] = None) -> PlanResult:
    """
    Duplicates per group plus the proportionally rescaled ensemble.

    The gain s = N'/N (data with duplicates over original data) scales
    k, sigma1, sigma2 and T.
    """
    if not budgets:
        raise InvalidParameterError("need at least one budget")
    eps = [float(e) for e, _ in budgets]
    counts = [int(n) for _, n in budgets]
    dups = duplicate_counts(eps, precision, duplicate_cap)

    gain = sum(u * n for u, n in zip(dups, counts)) / sum(counts)
    scaled = replace(
        config,
        k=int(round(config.k * gain)),
        sigma1=config.sigma1 * gain,
        sigma2=config.sigma2 * gain,
        threshold=config.threshold * gain,
    )
    delta = config.delta if delta is None else delta
    groups = tuple(
        GroupSpec(f"g{i}", PrivacyBudget(e, delta), n, float(u), float(u))
        for i, (e, n, u) in enumerate(zip(eps, counts, dups))
    )
    logger.info(f"📊 upsampling duplicates {dups}, gain s={gain:.4f}, k {config.k} → {scaled.k}")
    return PlanResult(Variant.UPSAMPLING, groups, scaled, gain, _mixed_assignments(scaled.k))


# === 2. Vanishing ===

def plan_vanishing(budgets: Sequence[float], exponent: float = DEFAULT_VANISHING_EXPONENT) -> List[float]:
    """Participation frequency (eps / eps_max) ** exponent; the largest budget votes always."""
    eps = _check_budgets(budgets)
    if exponent <= 0:
        raise InvalidParameterError("vanishing exponent must be positive")
    return ((eps / eps.max()) ** exponent).tolist()


def vanishing_sigma(sigma2: float, frequencies: Sequence[float], scaling: str = "sqrt_active_fraction") -> float:
    """Answer noise for a thinned ensemble. Heuristic: sigma2 · sqrt(mean participation)."""
    if scaling == "none":
        return sigma2
    if scaling != "sqrt_active_fraction":
        raise InvalidParameterError(f"unknown sigma scaling {scaling!r}, expected one of {SIGMA_SCALINGS}")
    return sigma2 * math.sqrt(float(np.mean(frequencies)))


def _participation_pattern(freq: float, phases: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """
    Active flags (steps × phases): a teacher fires whenever floor(step·f + phase) steps up.
    Phases are fractions p/n; integer arithmetic keeps the pattern exact.
    """
    f = Fraction(freq).limit_denominator(1_000_000)
    n = phases.size
    num, den = f.numerator * n, f.denominator * n
    offset = phases * f.denominator
    before = (steps[:, None] * num + offset[None, :]) // den
    after = ((steps[:, None] + 1) * num + offset[None, :]) // den
    return after > before


def schedule_vanishing(frequencies: Sequence[float], num_queries: int,
                       reshuffle_period: int = DEFAULT_RESHUFFLE_PERIOD,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Active-teacher flags per query, shape (num_queries, k).

    Teachers sharing a frequency f get evenly shifted phases, so each fires
    once per 1/f queries while the number of active teachers stays level.
    Every reshuffle block (rounded up to whole periods) hands the phases to a
    fresh random permutation of those teachers.
    Windows of 1/f queries inside one block see each teacher once; a window
    across a block boundary can see a teacher zero or two times.
    """
    freqs = np.asarray(frequencies, dtype=float)
    if np.any(~(freqs > 0)) or np.any(freqs > 1):
        raise InvalidParameterError("participation frequencies must lie in (0, 1]")
    if reshuffle_period < 1:
        raise InvalidParameterError("reshuffle period must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)

    active = np.zeros((num_queries, freqs.size), dtype=bool)
    for freq in np.unique(freqs):
        members = np.flatnonzero(freqs == freq)
        period = max(1, int(round(1 / freq)))
        block = math.ceil(reshuffle_period / period) * period
        phases = np.arange(members.size)
        for start in range(0, num_queries, block):
            order = rng.permutation(members)
            steps = np.arange(min(block, num_queries - start))
            active[start:start + steps.size, order] = _participation_pattern(freq, phases, steps)
    return active


# === 3. Weighting ===

def plan_weighting(budgets: Sequence[float], teacher_counts: Optional[Sequence[int]] = None) -> List[float]:
    """
    Teacher weight per group proportional to its budget, normalised so the
    mean weight over all teachers is one.
    """
    eps = _check_budgets(budgets)
    counts = np.ones(eps.size) if teacher_counts is None else np.asarray(teacher_counts, dtype=float)
    if counts.shape != eps.shape or np.any(counts < 0) or counts.sum() <= 0:
        raise InvalidParameterError("teacher counts must match the budgets and be nonnegative")
    ratios = eps / eps.min()
    mean = float(np.dot(counts, ratios) / counts.sum())
    return (ratios / mean).tolist()


# === 4. Teacher allocation and dispatch ===

def allocate_teachers(points_per_group: Sequence[int], k: int) -> List[int]:
    """Teachers per group, proportional to group size, each group at least one."""
    points = np.asarray(points_per_group, dtype=float)
    if k < points.size:
        raise PlanInfeasibleError(
            f"{points.size} budget groups cannot each get their own teacher among k={k}",
            remedy="raise k or merge budget groups")
    counts = np.ones(points.size, dtype=int)
    extra = split_counts(k - points.size, points)
    return (counts + np.asarray(extra, dtype=int)).tolist()


def _grouped_assignments(teacher_counts: Sequence[int], group_ids: Sequence[str],
                         weights: Sequence[float], participations: Sequence[float]) -> Tuple[TeacherAssignment, ...]:
    assignments = []
    teacher = 0
    for count, gid, w, s in zip(teacher_counts, group_ids, weights, participations):
        for _ in range(count):
            assignments.append(TeacherAssignment(teacher, gid, float(w), float(s)))
            teacher += 1
    return tuple(assignments)


def class_skew_shares(class_fractions: Sequence[float], favored_class: int, favored_ratio: float,
                      low_epsilon: float, high_epsilon: float) -> List[Tuple[float, float]]:
    """
    Budget shares when only part of one class gets the higher budget.

    favored_ratio of favored_class moves to high_epsilon, everything else
    keeps low_epsilon. Every personalized variant plans from the result.
    """
    fractions = np.asarray(class_fractions, dtype=float)
    if not (0 <= favored_class < fractions.size):
        raise InvalidParameterError(f"favored class {favored_class} outside 0..{fractions.size - 1}")
    if not (0 <= favored_ratio <= 1):
        raise InvalidParameterError("favored ratio must lie in [0, 1]")
    high = float(fractions[favored_class] / fractions.sum() * favored_ratio)
    shares = [(low_epsilon, 1.0 - high)]
    if high > 0:
        shares.append((high_epsilon, high))
    return shares


def plan_for_variant(variant: Variant, shares: Sequence[Tuple[float, float]], num_points: int,
                     config: VotingConfig, precision: float = DEFAULT_PRECISION,
                     duplicate_cap: int = DEFAULT_DUPLICATE_CAP,
                     vanishing_exponent: float = DEFAULT_VANISHING_EXPONENT,
                     sigma_scaling: str = "sqrt_active_fraction") -> PlanResult:
    """Build the plan for any aggregator from (epsilon, ratio) budget shares."""
    variant = Variant(variant)
    if not shares:
        raise InvalidParameterError("need at least one budget share")
    eps = [float(e) for e, _ in shares]
    _check_budgets(eps)
    points = split_counts(num_points, [r for _, r in shares])
    if min(points) < 1:
        raise InvalidParameterError("every budget share must cover at least one data point")
    ids = [f"g{i}" for i in range(len(shares))]

    if variant is Variant.UPSAMPLING:
        return plan_upsampling(list(zip(eps, points)), precision, config, duplicate_cap)

    if variant in (Variant.PLAIN, Variant.CONFIDENT):
        groups = tuple(GroupSpec(gid, PrivacyBudget(e, config.delta), n, 1.0, 1.0)
                       for gid, e, n in zip(ids, eps, points))
        return PlanResult(variant, groups, config, 1.0, _mixed_assignments(config.k))

    teacher_counts = allocate_teachers(points, config.k)
    if variant is Variant.VANISHING:
        freqs = plan_vanishing(eps, vanishing_exponent)
        per_teacher = np.repeat(freqs, teacher_counts)
        scaled = replace(config, sigma2=vanishing_sigma(config.sigma2, per_teacher, sigma_scaling))
        groups = tuple(GroupSpec(gid, PrivacyBudget(e, config.delta), n, f, 1.0)
                       for gid, e, n, f in zip(ids, eps, points, freqs))
        assignments = _grouped_assignments(teacher_counts, ids, [1.0] * len(ids), freqs)
        logger.info(f"📊 vanishing frequencies {[round(f, 6) for f in freqs]}, sigma2 {config.sigma2} → {scaled.sigma2:.3f}")
        return PlanResult(variant, groups, scaled, 1.0, assignments)

    weights = plan_weighting(eps, teacher_counts)
    groups = tuple(GroupSpec(gid, PrivacyBudget(e, config.delta), n, w, w)
                   for gid, e, n, w in zip(ids, eps, points, weights))
    assignments = _grouped_assignments(teacher_counts, ids, weights, [1.0] * len(ids))
    logger.info(f"📊 weighting weights {[round(w, 6) for w in weights]} over teachers {teacher_counts}")
    return PlanResult(variant, groups, config, 1.0, assignments)
