import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate

from errors import EmptyInputError, GridMismatchError, InvalidParameterError
from rdp_accountant import (DEFAULT_ORDERS, PrivacyBudget, RdpCurve, TightBoundInputs, compose,
                            data_independent_always_optimal, deviation_probability_bound, gaussian_rdp,
                            log_deviation_probability_bound, loose_bound, loose_curve, orders_grid,
                            per_query_cost, rdp_to_dp, threshold_rdp_loose, tight_bound)

LOG_INV_DELTA = math.log(1e5)


def erfc_by_quadrature(x):
    value, _ = integrate.quad(lambda t: math.exp(-t * t), x, math.inf, epsabs=1e-15, epsrel=1e-13)
    return 2 / math.sqrt(math.pi) * value


def grid_scan(orders, costs, delta):
    best_eps, best_alpha = math.inf, None
    for alpha, cost in zip(orders.tolist(), costs.tolist()):
        eps = cost + math.log(1 / delta) / (alpha - 1)
        if eps < best_eps:
            best_eps, best_alpha = eps, alpha
    return best_eps, best_alpha


def tight_reference(q, alpha1, alpha2, eps1, eps2, target):
    a = (1 - q) / (1 - (q * math.exp(eps2)) ** ((alpha2 - 1) / alpha2))
    b = math.exp(eps1) / q ** (1 / (alpha1 - 1))
    return math.log((1 - q) * a ** (target - 1) + q * b ** (target - 1)) / (target - 1)


# === Gaussian and loose bounds ===

def test_gaussian_rdp_examples():
    assert gaussian_rdp(1, 1, 2) == pytest.approx(1.0, rel=1e-12)
    assert gaussian_rdp(2, 40, 10) == pytest.approx(0.0125, rel=1e-12)
    assert gaussian_rdp(1, 1e9, 50) < 1e-15


def test_gaussian_rdp_rejects_nonpositive_sigma():
    with pytest.raises(InvalidParameterError):
        gaussian_rdp(1, 0, 2)
    with pytest.raises(InvalidParameterError):
        gaussian_rdp(1, -3, 2)
    with pytest.raises(InvalidParameterError):
        gaussian_rdp(1, 1, 1.0)


def test_loose_bound_examples():
    assert loose_bound(1, 40, 8) == pytest.approx(0.005, rel=1e-12)
    assert loose_bound(3, 40, 8) == pytest.approx(0.045, rel=1e-12)
    assert_allclose(loose_bound(1, 40, DEFAULT_ORDERS), 2 * gaussian_rdp(1, 40, DEFAULT_ORDERS), rtol=1e-15)


def test_loose_bound_random_draws_match_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        delta_s = rng.uniform(0.1, 10)
        sigma = rng.uniform(0.5, 300)
        alpha = rng.uniform(1.01, 200)
        assert loose_bound(delta_s, sigma, alpha) == pytest.approx(delta_s ** 2 * alpha / sigma ** 2, rel=1e-12)
        assert gaussian_rdp(delta_s, sigma, alpha) == pytest.approx(delta_s ** 2 * alpha / (2 * sigma ** 2), rel=1e-12)


def test_scaling_invariance():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        c, delta_s, sigma = rng.uniform(0.01, 100), rng.uniform(0.1, 10), rng.uniform(0.5, 300)
        alpha = rng.uniform(1.01, 100)
        assert loose_bound(c * delta_s, c * sigma, alpha) == pytest.approx(loose_bound(delta_s, sigma, alpha), rel=1e-12)


def test_quadratic_sensitivity_law_and_linearity():
    rng = np.random.default_rng(2)
    for _ in range(200):
        c, delta_s, sigma = rng.uniform(0.1, 5), rng.uniform(0.1, 4), rng.uniform(1, 100)
        curve = loose_bound(delta_s, sigma, DEFAULT_ORDERS)
        assert_allclose(loose_bound(c * delta_s, sigma, DEFAULT_ORDERS), c ** 2 * curve, rtol=1e-12)
        assert_allclose(curve / DEFAULT_ORDERS, np.full(DEFAULT_ORDERS.size, curve[0] / 2), rtol=1e-12)


def test_threshold_charge_is_loose_bound_with_sigma1():
    assert threshold_rdp_loose(1.0, 150.0) == loose_curve(1.0, 150.0)


# === Curves, composition, conversion ===

def test_compose_examples():
    a = RdpCurve([2], [0.1])
    b = RdpCurve([2], [0.2])
    assert_allclose((a + b).costs, [0.3])
    curve = loose_curve(1, 40)
    assert compose(curve, RdpCurve.zeros()) == curve


def test_four_hundred_compositions():
    step = loose_curve(1, 40, [8])
    total = RdpCurve.zeros([8])
    for _ in range(400):
        total = total + step
    assert total.costs[0] == pytest.approx(2.0, rel=1e-12)


def test_compose_is_monotone_and_checks_grids():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = RdpCurve(DEFAULT_ORDERS, rng.exponential(size=DEFAULT_ORDERS.size))
        b = RdpCurve(DEFAULT_ORDERS, rng.exponential(size=DEFAULT_ORDERS.size))
        assert np.all((a + b).costs >= a.costs)
    with pytest.raises(GridMismatchError):
        compose(RdpCurve([2, 3], [0, 0]), RdpCurve([2, 4], [0, 0]))


def test_curve_validation():
    with pytest.raises(InvalidParameterError):
        RdpCurve([2, 3], [0.1, -0.1])
    with pytest.raises(InvalidParameterError):
        RdpCurve([2, 3], [0.1])
    with pytest.raises(InvalidParameterError):
        RdpCurve([1, 3], [0.1, 0.1])
    curve = RdpCurve([2, 3], [0.1, 0.2])
    with pytest.raises(ValueError):
        curve.costs[0] = 5.0


def test_rdp_to_dp_examples():
    eps, alpha = rdp_to_dp(RdpCurve([2], [1.0]), 1e-5)
    assert eps == pytest.approx(1.0 + LOG_INV_DELTA, rel=1e-12)
    assert alpha == 2
    assert eps == pytest.approx(12.5129, abs=1e-4)

    eps, alpha = RdpCurve.zeros().to_dp(1e-5)
    assert eps == pytest.approx(LOG_INV_DELTA / 49, rel=1e-12)
    assert alpha == 50


def test_rdp_to_dp_matches_grid_scan():
    eps, alpha = rdp_to_dp(loose_curve(1, 40), 1e-5)
    assert (eps, alpha) == pytest.approx(grid_scan(DEFAULT_ORDERS, DEFAULT_ORDERS / 1600, 1e-5), rel=1e-12)

    rng = np.random.default_rng(4)
    for _ in range(1000):
        orders = np.sort(rng.choice(np.arange(2, 80), size=rng.integers(1, 30), replace=False)).astype(float)
        costs = rng.exponential(scale=rng.uniform(0.001, 2), size=orders.size)
        delta = 10 ** rng.uniform(-10, -1)
        got = rdp_to_dp(RdpCurve(orders, costs), delta)
        want = grid_scan(orders, costs, delta)
        assert got[0] == pytest.approx(want[0], rel=1e-12)
        assert got[1] == want[1]


def test_rdp_to_dp_ties_go_to_smaller_order():
    log_term = math.log(1 / 1e-5)
    # eps at 2 and 3 coincide exactly
    eps, alpha = rdp_to_dp(RdpCurve([2, 3], [0.0, log_term / 2]), 1e-5)
    assert alpha == 2
    assert eps == log_term


def test_rdp_to_dp_errors():
    with pytest.raises(EmptyInputError):
        rdp_to_dp(RdpCurve.empty(), 1e-5)
    with pytest.raises(InvalidParameterError):
        rdp_to_dp(RdpCurve.zeros(), 0.0)


def test_privacy_budget():
    budget = PrivacyBudget(math.log(2))
    assert not budget.exceeded_by(math.log(2))
    assert budget.exceeded_by(math.log(2) + 1e-12)
    with pytest.raises(InvalidParameterError):
        PrivacyBudget(-1.0)
    with pytest.raises(InvalidParameterError):
        PrivacyBudget(1.0, 0.0)


def test_orders_grid():
    assert_array_equal(orders_grid(), np.arange(2, 51))
    with pytest.raises(InvalidParameterError):
        orders_grid(1, 10)


# === Deviation probability ===

def test_deviation_probability_examples():
    assert deviation_probability_bound([5, 5, 5], 10) == 1.0
    assert deviation_probability_bound([7, 7], 3) == pytest.approx(0.5, rel=1e-15)
    assert deviation_probability_bound([200, 0], 40) == pytest.approx(0.5 * erfc_by_quadrature(2.5), abs=1e-12)


def test_deviation_probability_matches_quadrature():
    rng = np.random.default_rng(5)
    for _ in range(50):
        counts = rng.integers(0, 250, size=rng.integers(2, 11)).astype(float)
        sigma = rng.uniform(5, 100)
        gaps = counts.max() - np.delete(counts, np.argmax(counts))
        want = min(1.0, 0.5 * sum(erfc_by_quadrature(g / (2 * sigma)) for g in gaps))
        assert deviation_probability_bound(counts, sigma) == pytest.approx(want, abs=1e-12)


def test_log_deviation_probability_agrees_and_survives_tiny_q():
    counts = np.array([180.0, 40, 20, 10])
    assert log_deviation_probability_bound(counts, 40) == pytest.approx(
        math.log(deviation_probability_bound(counts, 40)), rel=1e-10)
    assert deviation_probability_bound([250, 0], 2) == 0.0
    assert -math.inf < log_deviation_probability_bound([250, 0], 2) < -1000
    assert log_deviation_probability_bound([3.0], 1) == -math.inf


def test_deviation_probability_monotonicity():
    rng = np.random.default_rng(6)
    for _ in range(200):
        counts = rng.integers(0, 100, size=5).astype(float)
        sigma = rng.uniform(5, 60)
        top = np.argmax(counts)
        more = counts.copy()
        more[top] += rng.uniform(0, 50)
        assert deviation_probability_bound(more, sigma) <= deviation_probability_bound(counts, sigma)
        assert deviation_probability_bound(counts, sigma * 1.5) >= deviation_probability_bound(counts, sigma)


# === Tight bound ===

def test_tight_bound_zero_q_costs_nothing():
    eps = loose_bound(1, 40, 20)
    assert tight_bound(TightBoundInputs(0.0, 20, 20, eps, eps, 8)) == 0.0


def test_tight_bound_inapplicable_for_q_one():
    eps = loose_bound(1, 40, 20)
    assert tight_bound(TightBoundInputs(1.0, 20, 20, eps, eps, 8)) is None


def test_tight_bound_example_below_loose():
    eps = loose_bound(1, 40, 20)
    value = tight_bound(TightBoundInputs(1e-4, 20, 20, eps, eps, 8))
    assert value is not None
    assert value < loose_bound(1, 40, 8) == pytest.approx(0.005)
    assert value == pytest.approx(tight_reference(1e-4, 20, 20, eps, eps, 8), rel=1e-9)


def test_tight_bound_input_validation():
    with pytest.raises(InvalidParameterError):
        TightBoundInputs(0.1, 5, 5, 0.1, 0.1, 8)
    with pytest.raises(InvalidParameterError):
        TightBoundInputs(1.5, 20, 20, 0.1, 0.1, 8)


def test_tight_bound_never_exceeds_loose():
    rng = np.random.default_rng(7)
    for _ in range(500):
        alpha = float(rng.integers(2, 200))
        sigma = rng.uniform(5, 100)
        eps = loose_bound(1, sigma, alpha)
        target = float(rng.integers(2, int(alpha) + 1))
        q = 10 ** rng.uniform(-12, 0)
        value = tight_bound(TightBoundInputs(q, alpha, alpha, eps, eps, target))
        if value is not None:
            assert value <= loose_bound(1, sigma, target) + 1e-9


def test_tight_bound_over_candidates_takes_best_per_order():
    candidates = np.array([10.0, 20.0, 60.0])
    eps = loose_bound(1, 40, candidates)
    targets = np.array([4.0, 8.0, 30.0])
    best = tight_bound(TightBoundInputs(1e-4, candidates, candidates, eps, eps, targets))
    assert best.shape == (3,)
    for target, value in zip(targets, best):
        singles = [tight_bound(TightBoundInputs(1e-4, a, a, e, e, target))
                   for a, e in zip(candidates, eps) if target <= a]
        singles = [s for s in singles if s is not None]
        if singles:
            assert value == pytest.approx(min(singles), rel=1e-12)
        else:
            assert np.isnan(value)


def test_tight_bound_accepts_log_q_below_float_range():
    eps = loose_bound(1, 40, 20)
    assert tight_bound(TightBoundInputs(0.0, 20, 20, eps, eps, 8, log_q=-800.0)) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(InvalidParameterError):
        TightBoundInputs(0.5, 20, 20, eps, eps, 8, log_q=0.5)


# === Per-query cost ===

def test_unanimous_votes_beat_loose_everywhere():
    votes = np.zeros(10)
    votes[0] = 250
    costs = per_query_cost(votes, 1, 40).costs
    assert np.all(costs < loose_bound(1, 40, DEFAULT_ORDERS))


def test_tied_votes_pay_loose_bound():
    votes = np.full(10, 25.0)
    assert_array_equal(per_query_cost(votes, 1, 40).costs, loose_bound(1, 40, DEFAULT_ORDERS))


def test_double_sensitivity_equals_halved_noise_on_halved_votes():
    votes = np.array([230.0, 12, 5, 3, 0, 0, 0, 0, 0, 0])
    doubled = per_query_cost(votes, 2, 40).costs
    halved = per_query_cost(votes / 2, 1, 20).costs
    assert_allclose(doubled, halved, rtol=1e-9)


def test_per_query_cost_monotone_in_sensitivity():
    votes = np.array([240.0, 6, 4, 0, 0, 0, 0, 0, 0, 0])
    previous = per_query_cost(votes, 0.5, 40).costs
    for sensitivity in (1.0, 1.5, 2.0, 3.0, 4.0):
        current = per_query_cost(votes, sensitivity, 40).costs
        assert np.all(current >= previous - 1e-12)
        previous = current


def test_bound_ordering_on_high_consensus_votes():
    rng = np.random.default_rng(8)
    loose = loose_bound(1, 40, DEFAULT_ORDERS)
    strictly_smaller = 0
    checked = 0
    for _ in range(10_000):
        top = rng.integers(200, 251)
        rest = rng.multinomial(250 - top, np.full(9, 1 / 9))
        votes = np.concatenate([[top], rest]).astype(float)
        costs = per_query_cost(votes, 1, 40).costs
        assert np.all(costs <= loose)
        if top - rest.max() >= 100:
            checked += 1
            strictly_smaller += bool(np.any(costs < loose))
    assert checked > 0
    assert strictly_smaller >= 0.95 * checked


def test_data_independent_check():
    assert not data_independent_always_optimal(250, 10, 40).all()
    assert data_independent_always_optimal(1, 10, 40).all()
