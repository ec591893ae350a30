"""
Rényi-DP accounting for Gaussian-noise PATE aggregators.

Loose (data-independent) and tight (data-dependent) per-query bounds,
individual sensitivity scaling, composition and conversion to (epsilon, delta).
All functions are pure.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.special
import scipy.stats

from errors import EmptyInputError, GridMismatchError, InvalidParameterError
from run_logging import get_logger

logger = get_logger("rdp_accountant")

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Tight values may exceed the loose bound by this much before they count as broken.
TIGHT_SLACK = 1e-9


def orders_grid(lo: int = 2, hi: int = 50) -> np.ndarray:
    """Integer Rényi orders lo..hi inclusive, as floats."""
    if lo <= 1 or hi < lo:
        raise InvalidParameterError(f"order grid must satisfy 1 < lo <= hi, got {lo}..{hi}")
    return np.arange(lo, hi + 1, dtype=float)


DEFAULT_ORDERS = orders_grid()

# Higher orders searched for the tight bound; the best alpha2 is often near sigma·sqrt(-log q), well above 50.
TIGHT_LADDER = np.unique(np.round(np.geomspace(51, 1000, 40)))


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise InvalidParameterError(f"budget epsilon must be >= 0, got {self.epsilon}")
        if not (0 < self.delta <= 1):
            raise InvalidParameterError(f"budget delta must lie in (0, 1], got {self.delta}")

    def exceeded_by(self, spent: float) -> bool:
        return spent > self.epsilon


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise InvalidParameterError(f"{name} must be a positive finite number, got {value}")
    return value


def _check_orders(alpha: ArrayLike) -> np.ndarray:
    orders = np.asarray(alpha, dtype=float)
    if np.any(~np.isfinite(orders)) or np.any(orders <= 1):
        raise InvalidParameterError("Rényi orders must be finite and > 1")
    return orders


def _unwrap(values: np.ndarray, like: ArrayLike):
    return float(values) if np.ndim(like) == 0 else values


class RdpCurve:
    """Accumulated RDP cost per Rényi order for one privacy group."""

    __slots__ = ("orders", "costs")

    def __init__(self, orders: ArrayLike, costs: ArrayLike):
        orders = _check_orders(np.atleast_1d(orders))
        costs = np.atleast_1d(np.asarray(costs, dtype=float))
        if orders.ndim != 1 or orders.shape != costs.shape:
            raise InvalidParameterError(
                f"orders and costs must have the same length ({orders.size} vs {costs.size})")
        if np.any(np.isnan(costs)) or np.any(costs < 0):
            raise InvalidParameterError("RDP costs must be nonnegative")
        orders.setflags(write=False)
        costs.setflags(write=False)
        self.orders = orders
        self.costs = costs

    @classmethod
    def zeros(cls, orders: ArrayLike = DEFAULT_ORDERS) -> "RdpCurve":
        orders = np.atleast_1d(np.asarray(orders, dtype=float))
        return cls(orders, np.zeros_like(orders))

    @classmethod
    def empty(cls) -> "RdpCurve":
        curve = object.__new__(cls)
        curve.orders = np.empty(0)
        curve.costs = np.empty(0)
        return curve

    def __len__(self) -> int:
        return self.orders.size

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RdpCurve):
            return NotImplemented
        return np.array_equal(self.orders, other.orders) and np.array_equal(self.costs, other.costs)

    def __repr__(self) -> str:
        return f"RdpCurve(orders={self.orders.tolist()}, costs={self.costs.tolist()})"

    def same_grid(self, other: "RdpCurve") -> bool:
        return np.array_equal(self.orders, other.orders)

    def to_dp(self, delta: float) -> Tuple[float, float]:
        return rdp_to_dp(self, delta)


# === 1. Data-independent bounds ===

def gaussian_rdp(sensitivity: float, sigma: float, alpha: ArrayLike):
    """RDP of the Gaussian mechanism: sensitivity² · alpha / (2 sigma²)."""
    sensitivity = _check_positive("sensitivity", sensitivity)
    sigma = _check_positive("sigma", sigma)
    orders = _check_orders(alpha)
    return _unwrap(sensitivity ** 2 * orders / (2 * sigma ** 2), alpha)


def loose_bound(sensitivity: float, sigma: float, alpha: ArrayLike):
    """
    Individual loose bound of GNMax: sensitivity² · alpha / sigma².

    Two Gaussian releases (the winning class and the runner-up) compose,
    so this is exactly twice gaussian_rdp.
    """
    return 2.0 * gaussian_rdp(sensitivity, sigma, alpha)


def loose_curve(sensitivity: float, sigma: float, orders: ArrayLike = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(orders, loose_bound(sensitivity, sigma, np.atleast_1d(orders)))


def threshold_rdp_loose(sensitivity: float, sigma1: float, orders: ArrayLike = DEFAULT_ORDERS) -> RdpCurve:
    """Charge of one consensus check with noise sigma1."""
    return loose_curve(sensitivity, sigma1, orders)


# === 2. Composition and conversion ===

def compose(curve_a: RdpCurve, curve_b: RdpCurve) -> RdpCurve:
    """RDP composition: element-wise sum on a shared order grid."""
    if not curve_a.same_grid(curve_b):
        raise GridMismatchError(
            f"cannot compose curves on different order grids "
            f"({curve_a.orders.tolist()} vs {curve_b.orders.tolist()})")
    return RdpCurve(curve_a.orders, curve_a.costs + curve_b.costs)


def rdp_to_dp(curve: RdpCurve, delta: float) -> Tuple[float, float]:
    """
    Best (epsilon, alpha) over the curve's grid for the given delta.

    epsilon = cost_alpha + ln(1/delta) / (alpha - 1); ties go to the smaller alpha.
    """
    if len(curve) == 0:
        raise EmptyInputError("cannot convert an empty RDP curve")
    if not (0 < delta <= 1):
        raise InvalidParameterError(f"delta must lie in (0, 1], got {delta}")

    eps = curve.costs + math.log(1 / delta) / (curve.orders - 1)
    best = eps.min()
    alpha = curve.orders[eps == best].min()
    return float(best), float(alpha)


# === 3. Deviation probability of GNMax ===

def _as_counts(votes) -> np.ndarray:
    counts = np.asarray(getattr(votes, "counts", votes), dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise EmptyInputError("vote vector must be a non-empty 1-d array")
    if np.any(~np.isfinite(counts)) or np.any(counts < 0):
        raise InvalidParameterError("vote counts must be finite and nonnegative")
    return counts


def _gaps_to_plurality(counts: np.ndarray) -> np.ndarray:
    top = int(np.argmax(counts))
    return counts[top] - np.delete(counts, top)


def deviation_probability_bound(votes, sigma: float) -> float:
    """
    Upper bound on Pr[GNMax != plurality class]:
    ½ Σ_{j != j*} erfc((n_j* - n_j) / (2 sigma)), clamped to [0, 1].
    """
    sigma = _check_positive("sigma", sigma)
    gaps = _gaps_to_plurality(_as_counts(votes))
    q = 0.5 * float(np.sum(scipy.special.erfc(gaps / (2 * sigma))))
    return min(1.0, q)


def log_deviation_probability_bound(votes, sigma: float) -> float:
    """Natural log of deviation_probability_bound, stable for tiny q."""
    sigma = _check_positive("sigma", sigma)
    gaps = _gaps_to_plurality(_as_counts(votes))
    if gaps.size == 0:
        return -math.inf
    # ½ erfc(g / 2σ) is the survival function of N(0, 2σ²) at g
    logq = scipy.special.logsumexp(scipy.stats.norm.logsf(gaps, scale=math.sqrt(2) * sigma))
    return min(0.0, float(logq))


# === 4. Data-dependent (tight) bound ===

@dataclass(frozen=True)
class TightBoundInputs:
    """
    alpha1, alpha2, eps1 and eps2 are one candidate or equal-shape arrays of
    candidates; target_alpha is one order or an array of orders. log_q, when
    set, stands in for log(q) below the float range of q.
    """
    q: float
    alpha1: ArrayLike
    alpha2: ArrayLike
    eps1: ArrayLike
    eps2: ArrayLike
    target_alpha: ArrayLike
    log_q: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.q <= 1.0):
            raise InvalidParameterError(f"q must lie in [0, 1], got {self.q}")
        if self.log_q is not None and self.log_q > 0:
            raise InvalidParameterError(f"log q must be <= 0, got {self.log_q}")
        if np.any(np.asarray(self.eps1) < 0) or np.any(np.asarray(self.eps2) < 0):
            raise InvalidParameterError("eps1 and eps2 must be nonnegative")
        _check_orders(np.concatenate([np.ravel(self.alpha1), np.ravel(self.alpha2), np.ravel(self.target_alpha)]))
        if self.scalar and self.target_alpha > self.alpha1:
            raise InvalidParameterError(
                f"target alpha {self.target_alpha} exceeds alpha1 {self.alpha1}")

    @property
    def scalar(self) -> bool:
        return np.ndim(self.target_alpha) == 0 and np.ndim(self.alpha1) == 0

    @property
    def logq(self) -> float:
        if self.log_q is not None:
            return float(self.log_q)
        return math.log(self.q) if self.q > 0 else -math.inf


def _log1mexp(x: np.ndarray) -> np.ndarray:
    """log(1 - exp(x)) for x <= 0; -inf at 0, nan for positive x."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.log1p(-np.exp(np.minimum(x, -math.log(2))))
        large = np.log(-np.expm1(x))
    return np.where(x < -math.log(2), small, large)


def _tight_values(logq: float, alpha1: np.ndarray, alpha2: np.ndarray,
                  eps1: np.ndarray, eps2: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Tight bound for every (target, candidate) pair; +inf where it does not apply.

    targets has shape (n, 1), the candidate arrays shape (m,).
    """
    if logq == -math.inf:
        return np.zeros(np.broadcast(targets, alpha1).shape)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log1q = math.log1p(-math.exp(logq)) if logq < 0 else -math.inf

        # q <= exp((a2 - 1) e2) / (a1/(a1-1) * a2/(a2-1))^a2, and q e^e2 < 1 so A stays finite
        log_limit = (alpha2 - 1) * eps2 - alpha2 * (np.log(alpha1 / (alpha1 - 1)) + np.log(alpha2 / (alpha2 - 1)))
        applicable = (logq <= log_limit) & (logq + eps2 < 0) & (targets <= alpha1)

        log_a = (targets - 1) * (log1q - _log1mexp((alpha2 - 1) / alpha2 * (logq + eps2)))
        log_b = (targets - 1) * (eps1 - logq / (alpha1 - 1))
        values = np.logaddexp(log1q + log_a, logq + log_b) / (targets - 1)

    values = np.where(applicable & np.isfinite(values), np.maximum(values, 0.0), np.inf)
    return values


def tight_bound(inputs: TightBoundInputs):
    """
    Data-dependent RDP of GNMax at inputs.target_alpha, or None when the
    bound does not apply and the caller must use the loose bound.

    With candidate arrays the result is the best candidate per target order,
    as an array with nan where none applies.
    """
    alpha1 = np.atleast_1d(np.asarray(inputs.alpha1, dtype=float))
    alpha2 = np.atleast_1d(np.asarray(inputs.alpha2, dtype=float))
    eps1 = np.atleast_1d(np.asarray(inputs.eps1, dtype=float))
    eps2 = np.atleast_1d(np.asarray(inputs.eps2, dtype=float))
    targets = np.atleast_1d(np.asarray(inputs.target_alpha, dtype=float))[:, None]

    values = _tight_values(inputs.logq, alpha1, alpha2, eps1, eps2, targets)
    # eps1 comes from the loose bound, which is linear in alpha
    loose = targets * eps1 / alpha1
    kept = np.where(values <= loose + TIGHT_SLACK, np.minimum(values, loose), np.inf)
    best = kept.min(axis=1)
    best = np.where(np.isfinite(best), best, np.nan)

    if not inputs.scalar:
        return best
    if np.isnan(best[0]):
        if np.isfinite(values[0, 0]):
            logger.debug(f"⚠️ tight bound {values[0, 0]:.3e} above loose {loose[0, 0]:.3e} "
                         f"at alpha={inputs.target_alpha}")
        return None
    return float(best[0])


def default_candidates(orders: ArrayLike = DEFAULT_ORDERS) -> np.ndarray:
    """alpha1 = alpha2 candidates for the tight bound: the order grid plus TIGHT_LADDER."""
    return np.union1d(np.atleast_1d(np.asarray(orders, dtype=float)), TIGHT_LADDER)


def tight_bound_curve(logq: float, sigma: float, orders: ArrayLike = DEFAULT_ORDERS,
                      candidates: Optional[ArrayLike] = None) -> np.ndarray:
    """
    Best tight bound per order for sensitivity 1 and noise sigma; nan where
    no candidate alpha1 = alpha2 applies or none beats the loose bound.
    """
    sigma = _check_positive("sigma", sigma)
    orders = _check_orders(np.atleast_1d(orders))
    candidates = default_candidates(orders) if candidates is None else _check_orders(np.atleast_1d(candidates))
    if logq > 0:
        raise InvalidParameterError(f"log q must be <= 0, got {logq}")

    eps = candidates / sigma ** 2
    return tight_bound(TightBoundInputs(math.exp(logq), candidates, candidates, eps, eps, orders, log_q=logq))


def per_query_cost(votes, sensitivity: float, sigma: float, orders: ArrayLike = DEFAULT_ORDERS) -> RdpCurve:
    """
    RDP charge of one GNMax answer for a point with the given sensitivity.

    The deviation probability belongs to the mechanism and uses the real
    sigma; the tight bound is then evaluated at the relative noise
    sigma / sensitivity, where the sensitivity is one.
    """
    sensitivity = _check_positive("sensitivity", sensitivity)
    sigma = _check_positive("sigma", sigma)
    orders = _check_orders(np.atleast_1d(orders))

    loose = loose_bound(sensitivity, sigma, orders)
    logq = log_deviation_probability_bound(votes, sigma)
    tight = tight_bound_curve(logq, sigma / sensitivity, orders)
    costs = np.where(np.isnan(tight), loose, np.minimum(tight, loose))
    return RdpCurve(orders, costs)


def data_independent_always_optimal(num_teachers: int, num_classes: int, sigma: float,
                                    orders: ArrayLike = DEFAULT_ORDERS) -> np.ndarray:
    """True per order when even a unanimous vote gets no tight-bound improvement."""
    unanimous = np.zeros(num_classes)
    unanimous[0] = num_teachers
    charged = per_query_cost(unanimous, 1.0, sigma, orders).costs
    return np.isclose(charged, loose_bound(1.0, sigma, np.atleast_1d(orders)))
