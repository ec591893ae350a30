import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from aggregators import Variant
from conftest import consensus_votes
from errors import DimensionMismatchError, InvalidParameterError
from experiment_config import MNIST_PRESET, AccountingOptions, BudgetShare, ExperimentConfig, SimulationConfig
from planner import plan_for_variant
from rdp_accountant import loose_bound, orders_grid
from voting_engine import (HISTORY_COLUMNS, CostHistory, QueryRecord, RepetitionSummary, RunConfig, RunSummary,
                           count_labels_until_exhaustion, mean_trajectories, repeat_and_aggregate, run_voting)

LOG2, LOG4 = math.log(2), math.log(4)
FAST_ORDERS = tuple(orders_grid(2, 20).tolist())


def run(votes, plan, seed=0, **options):
    return run_voting(votes, plan, RunConfig(plan.variant, seed=seed, **options))


def synthetic_history(answered, exhaustion=None):
    records = [QueryRecord(i, i, a, 0 if a else None, {"g0": 0.0}, {"g0": 2.0}) for i, a in enumerate(answered)]
    return CostHistory(["g0"], {"g0": 1.0}, 2000, records, sum(answered), exhaustion)


# === Labels until exhaustion ===

def test_count_labels_examples():
    assert count_labels_until_exhaustion(synthetic_history([False] * 20, (5, "g0"))) == 0
    assert count_labels_until_exhaustion(synthetic_history([True, False, True])) == 2

    answered = [True, True, False, True, False, True, False, True, True, False] + [True] * 10
    assert sum(answered[:10]) == 6
    history = synthetic_history(answered, (10, "g0"))
    assert count_labels_until_exhaustion(history) == 6


def test_count_labels_random_histories():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 60))
        answered = (rng.random(n) < rng.random()).tolist()
        exhaustion = (int(rng.integers(0, n)), "g0") if n and rng.random() < 0.7 else None
        history = synthetic_history(answered, exhaustion)
        cutoff = n if exhaustion is None else exhaustion[0]
        assert count_labels_until_exhaustion(history) == sum(answered[:cutoff])


# === Equal budgets ===

@pytest.mark.parametrize("variant", [Variant.UPSAMPLING, Variant.VANISHING, Variant.WEIGHTING])
def test_equal_budgets_reduce_to_confident_gnmax(variant, small_voting):
    baseline_plan = plan_for_variant(Variant.CONFIDENT, [(LOG2, 1.0)], 10000, small_voting)
    plan = plan_for_variant(variant, [(LOG2, 1.0)], 10000, small_voting)
    for seed in range(20):
        votes = consensus_votes(50, 500, seed=seed)
        base = run(votes, baseline_plan, seed)
        personal = run(votes, plan, seed)
        assert personal.labels() == base.labels()
        assert [r.answered for r in personal.records] == [r.answered for r in base.records]
        assert [r.epsilons for r in personal.records] == [r.epsilons for r in base.records]
        assert_array_equal(personal.final_curves["g0"], base.final_curves["g0"])
        assert personal.exhaustion == base.exhaustion


# === Sensitivity laws ===

def test_weighting_two_to_one_charges_four_to_one(small_voting):
    config = replace(small_voting, threshold=1e9)
    plan = plan_for_variant(Variant.WEIGHTING, [(1.0, 0.5), (2.0, 0.5)], 10000, config)
    low, high = (g.sensitivity for g in plan.groups)
    assert high / low == pytest.approx(2.0, rel=1e-12)
    orders = orders_grid()
    assert_allclose(loose_bound(high, config.sigma2, orders) / loose_bound(low, config.sigma2, orders), 4.0, rtol=1e-12)

    history = run(consensus_votes(50, 200, seed=1), plan)
    assert history.produced_label_count == 0
    assert_allclose(history.final_curves["g1"] / history.final_curves["g0"], 4.0, rtol=1e-12)


@pytest.mark.parametrize("variant", [Variant.UPSAMPLING, Variant.WEIGHTING])
@pytest.mark.parametrize("c", [2, 3, 4])
def test_cost_ratio_tracks_sensitivity_ratio(variant, c):
    config = replace(MNIST_PRESET, label_cap=5000)
    plan = plan_for_variant(variant, [(1.0, 0.5), (float(c), 0.5)], 60000, config)
    votes = consensus_votes(plan.scaled_config.k, 1000, seed=c)
    history = run(votes, plan, seed=c)
    assert len(history.records) == 1000
    final = history.final_epsilons()
    assert 0.8 * c <= final["g1"] / final["g0"] <= 1.25 * c


# === Invariants of a run ===

def test_epsilon_monotone_and_exhaustion_index_correct():
    rng = np.random.default_rng(2)
    for trial in range(150):
        variant = [Variant.CONFIDENT, Variant.WEIGHTING, Variant.VANISHING, Variant.PLAIN][trial % 4]
        budgets = sorted(rng.uniform(0.2, 1.5, size=2))
        config = replace(MNIST_PRESET, k=30, sigma1=20.0, sigma2=6.0, threshold=22.0)
        plan = plan_for_variant(variant, [(budgets[0], 0.5), (budgets[1], 0.5)], 1000, config)
        votes = consensus_votes(plan.scaled_config.k, 40, seed=trial)
        history = run(votes, plan, seed=trial, orders=FAST_ORDERS)

        for gid in history.group_ids:
            spent = [r.epsilons[gid] for r in history.records]
            assert all(b >= a for a, b in zip(spent, spent[1:]))

        budget = history.budgets
        if history.exhaustion is None:
            assert all(r.epsilons[g] <= budget[g] for r in history.records for g in history.group_ids)
        else:
            index, group = history.exhaustion
            for r in history.records[:index]:
                assert all(r.epsilons[g] <= budget[g] for g in history.group_ids)
            assert history.records[index].epsilons[group] > budget[group]
            assert count_labels_until_exhaustion(history) == sum(r.answered for r in history.records[:index])


def test_larger_sensitivity_never_spends_less():
    plan = plan_for_variant(Variant.WEIGHTING, [(LOG2, 0.5), (math.log(8), 0.5)], 60000, MNIST_PRESET)
    history = run(consensus_votes(250, 400, seed=3), plan, seed=3)
    assert all(r.epsilons["g1"] >= r.epsilons["g0"] for r in history.records)


def test_vanishing_charges_only_active_teachers():
    plan = plan_for_variant(Variant.VANISHING, [(LOG2, 0.5), (LOG4, 0.5)], 60000, MNIST_PRESET)
    history = run(consensus_votes(250, 320, seed=4), plan, seed=4)
    assert history.final_epsilons()["g0"] < history.final_epsilons()["g1"]
    assert np.all(history.final_curves["g0"] * 2 < history.final_curves["g1"])


def test_label_cap_and_stop_at_exhaustion(small_voting):
    plan = plan_for_variant(Variant.CONFIDENT, [(LOG2, 1.0)], 10000, replace(small_voting, label_cap=5))
    votes = consensus_votes(50, 300, seed=5)
    capped = run(votes, plan, seed=5)
    assert capped.produced_label_count == 5
    assert capped.records[-1].answered

    plan = plan_for_variant(Variant.CONFIDENT, [(0.5, 1.0)], 10000, small_voting)
    full = run(votes, plan, seed=5)
    stopped = run(votes, plan, seed=5, stop_at_exhaustion=True)
    assert full.exhausted and stopped.exhausted
    assert len(stopped.records) == stopped.exhaustion[0] + 1
    assert len(full.records) > len(stopped.records)
    assert count_labels_until_exhaustion(full) == count_labels_until_exhaustion(stopped)


def test_gate_accounting_modes(small_voting):
    config = replace(small_voting, threshold=1e9)
    votes = consensus_votes(50, 50, seed=6)
    confident = plan_for_variant(Variant.CONFIDENT, [(LOG2, 1.0)], 10000, config)
    assert np.all(run(votes, confident).final_curves["g0"] > 0)
    assert np.all(run(votes, confident, gate_accounting="free").final_curves["g0"] == 0)

    plain = plan_for_variant(Variant.PLAIN, [(LOG2, 1.0)], 10000, config)
    history = run(votes, plain)
    assert all(r.answered for r in history.records)


def test_run_is_deterministic(small_voting):
    plan = plan_for_variant(Variant.WEIGHTING, [(LOG2, 0.5), (LOG4, 0.5)], 10000, small_voting)
    votes = consensus_votes(50, 300, seed=8)
    a, b = run(votes, plan, seed=11), run(votes, plan, seed=11)
    assert a.labels() == b.labels()
    assert [r.epsilons for r in a.records] == [r.epsilons for r in b.records]
    assert a.to_frame().equals(b.to_frame())
    assert [r.answered for r in run(votes, plan, seed=12).records] != [r.answered for r in a.records]


def test_history_frame_layout(small_voting):
    plan = plan_for_variant(Variant.WEIGHTING, [(LOG2, 0.5), (LOG4, 0.5)], 10000, small_voting)
    history = run(consensus_votes(50, 30, seed=9), plan, orders=FAST_ORDERS)
    frame = history.to_frame()
    assert list(frame.columns) == HISTORY_COLUMNS
    assert len(frame) == 2 * len(history.records)
    assert frame["labels_so_far"].iloc[-1] == history.produced_label_count


def test_dimension_and_plan_checks(small_voting):
    plan = plan_for_variant(Variant.CONFIDENT, [(LOG2, 1.0)], 10000, small_voting)
    with pytest.raises(DimensionMismatchError):
        run(consensus_votes(49, 10), plan)
    with pytest.raises(DimensionMismatchError):
        run(consensus_votes(50, 10, num_classes=5), plan)
    with pytest.raises(InvalidParameterError):
        run_voting(consensus_votes(50, 10), plan, RunConfig(Variant.WEIGHTING))
    with pytest.raises(InvalidParameterError):
        run(consensus_votes(50, 10), plan, gate_accounting="sometimes")

    vanishing = plan_for_variant(Variant.VANISHING, [(LOG2, 0.5), (LOG4, 0.5)], 10000, small_voting)
    moved = replace(vanishing.assignments[-1], group_id="g9")
    stray = replace(vanishing, assignments=vanishing.assignments[:-1] + (moved,))
    with pytest.raises(InvalidParameterError, match="unknown groups"):
        run(consensus_votes(50, 10), stray)


# === Personalization pays off ===

def test_weighting_produces_more_labels_than_min_budget_baseline():
    baseline = plan_for_variant(Variant.CONFIDENT, [(LOG2, 1.0)], 60000, MNIST_PRESET)
    weighting = plan_for_variant(Variant.WEIGHTING, [(LOG2, 0.5), (LOG4, 0.5)], 60000, MNIST_PRESET)
    for seed in range(3):
        votes = consensus_votes(250, 1500, seed=seed)
        base = run(votes, baseline, seed, stop_at_exhaustion=True)
        personal = run(votes, weighting, seed, stop_at_exhaustion=True)
        assert count_labels_until_exhaustion(personal) >= count_labels_until_exhaustion(base)


# === Repetitions ===

def small_experiment(**changes):
    base = ExperimentConfig(
        variant=Variant.WEIGHTING,
        voting=replace(MNIST_PRESET, k=40, sigma1=25.0, sigma2=7.0, threshold=30.0),
        budgets=(BudgetShare(LOG2, 0.5), BudgetShare(LOG4, 0.5)),
        num_points=4000,
        simulation=SimulationConfig(num_queries=120, teacher_accuracy=0.9),
        accounting=AccountingOptions(max_order=20),
        seed=5,
    )
    return replace(base, **changes)


def test_single_repetition_summary_equals_run():
    summary, histories = repeat_and_aggregate(small_experiment())
    assert len(summary.runs) == 1
    assert summary.runs[0] == RunSummary.of(0, 0, histories[0])
    assert summary.mean_labels == count_labels_until_exhaustion(histories[0])
    assert summary.std_labels == 0.0


def test_repetitions_are_seeded_and_independent():
    config = small_experiment(ensembles=2, voting_processes=2)
    first, histories = repeat_and_aggregate(config)
    second, _ = repeat_and_aggregate(config)
    assert first == second
    assert len(first.runs) == 4
    assert [(r.ensemble, r.process) for r in first.runs] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len({tuple(h.labels()) for h in histories}) > 1
    assert repeat_and_aggregate(replace(config, seed=6))[0] != first


def test_parallel_jobs_match_sequential():
    config = small_experiment(ensembles=3)
    assert repeat_and_aggregate(config, jobs=2)[0] == repeat_and_aggregate(config, jobs=1)[0]


def test_summary_merge_is_associative():
    runs = repeat_and_aggregate(small_experiment(ensembles=3))[0].runs
    a, b, c = (RepetitionSummary((r,)) for r in runs)
    assert a.merge(b).merge(c) == a.merge(b.merge(c))
    assert a.merge(b).merge(c).mean_labels == pytest.approx(np.mean([r.labels_until_exhaustion for r in runs]))


def test_mean_trajectories():
    _, histories = repeat_and_aggregate(small_experiment(voting_processes=2))
    frame = mean_trajectories(histories)
    assert set(frame["group_id"]) == {"g0", "g1"}
    assert frame.groupby("group_id")["epsilon_spent"].apply(lambda s: s.is_monotonic_increasing).all()
    assert mean_trajectories([]).empty


@pytest.mark.slow
def test_personalized_variants_outlabel_baseline():
    """Simulated MNIST-scale ensembles, 10 ensembles x 5 voting processes."""
    base = ExperimentConfig(
        variant=Variant.CONFIDENT,
        simulation=SimulationConfig(num_queries=9000, teacher_accuracy=0.9, hard_query_rate=0.026),
        accounting=AccountingOptions(stop_at_exhaustion=True),
        ensembles=10,
        voting_processes=5,
    )
    two_budgets = (BudgetShare(LOG2, 0.5), BudgetShare(LOG4, 0.5))
    baseline = repeat_and_aggregate(base, jobs=4)[0].mean_labels
    upsampling = repeat_and_aggregate(replace(base, variant=Variant.UPSAMPLING, budgets=two_budgets), jobs=4)[0].mean_labels
    weighting = repeat_and_aggregate(replace(base, variant=Variant.WEIGHTING, budgets=two_budgets), jobs=4)[0].mean_labels
    vanishing = repeat_and_aggregate(replace(base, variant=Variant.VANISHING, budgets=two_budgets), jobs=4)[0].mean_labels

    assert 99 * 0.6 <= baseline <= 99 * 1.4
    assert upsampling >= 1.8 * baseline
    assert weighting >= 1.8 * baseline
    assert vanishing < min(upsampling, weighting)
