"""
The labeling loop: consensus gate, noisy answer, group-wise privacy
accounting at every Rényi order, best-order conversion after each voting,
and budget exhaustion.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from aggregators import Variant, VotingConfig, build_vote_vector, confident_gate, gnmax, teacher_weights
from errors import DimensionMismatchError, InvalidParameterError
from experiment_config import ExperimentConfig
from planner import PlanResult, plan_for_variant, schedule_vanishing
from rdp_accountant import DEFAULT_ORDERS, per_query_cost, threshold_rdp_loose
from run_logging import get_logger
from teacher_simulator import (SyntheticEnsemble, VoteMatrix, expand_for_upsampling, load_votes,
                               sample_ground_truth, sample_votes)

logger = get_logger("voting_engine")

GATE_STREAM = 1
ANSWER_STREAM = 2
SCHEDULE_STREAM = 3

HISTORY_COLUMNS = ["query_index", "source_row", "answered", "label", "group_id",
                   "epsilon_spent", "best_alpha", "labels_so_far", "exhausted"]


@dataclass(frozen=True)
class RunConfig:
    variant: Variant
    seed: int = 0
    orders: Tuple[float, ...] = tuple(DEFAULT_ORDERS.tolist())
    gate_accounting: str = "loose"
    reshuffle_period: int = 50
    stop_at_exhaustion: bool = False
    ensemble_seed: int = 0


@dataclass
class QueryRecord:
    query_index: int
    source_row: int
    answered: bool
    label: Optional[int]
    epsilons: Dict[str, float]
    best_alphas: Dict[str, float]


@dataclass
class CostHistory:
    group_ids: List[str]
    budgets: Dict[str, float]
    label_cap: int
    records: List[QueryRecord] = field(default_factory=list)
    produced_label_count: int = 0
    exhaustion: Optional[Tuple[int, str]] = None
    final_curves: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def exhausted(self) -> bool:
        return self.exhaustion is not None

    def final_epsilons(self) -> Dict[str, float]:
        if not self.records:
            return {g: 0.0 for g in self.group_ids}
        return dict(self.records[-1].epsilons)

    def labels(self) -> List[int]:
        return [r.label for r in self.records if r.answered]

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (query, group)."""
        rows = []
        labels_so_far = 0
        for r in self.records:
            labels_so_far += int(r.answered)
            exhausted = self.exhaustion is not None and r.query_index >= self.exhaustion[0]
            for g in self.group_ids:
                rows.append((r.query_index, r.source_row, r.answered, -1 if r.label is None else r.label,
                             g, r.epsilons[g], r.best_alphas[g], labels_so_far, exhausted))
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def query_rng(seed: int, query_index: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, query, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([seed, query_index, stream]))


class _Ledger:
    """
    RDP curves per accounting unit. Units are groups, except for vanishing
    where each teacher is a unit and a group's spend is its worst teacher.
    """

    def __init__(self, unit_groups: np.ndarray, group_ids: Sequence[str], orders: np.ndarray, delta: float):
        self.unit_groups = unit_groups
        self.group_ids = list(group_ids)
        self.orders = orders
        self.curves = np.zeros((unit_groups.size, orders.size))
        self.log_term = math.log(1 / delta) / (orders - 1)

    def charge(self, units: np.ndarray, costs: np.ndarray) -> None:
        self.curves[units] += costs

    def convert(self) -> Tuple[Dict[str, float], Dict[str, float], Dict[str, int]]:
        eps = self.curves + self.log_term
        best_idx = eps.argmin(axis=1)
        unit_eps = eps[np.arange(eps.shape[0]), best_idx]
        epsilons, alphas, worst_units = {}, {}, {}
        for gi, gid in enumerate(self.group_ids):
            units = np.flatnonzero(self.unit_groups == gi)
            worst = units[int(np.argmax(unit_eps[units]))]
            epsilons[gid] = float(unit_eps[worst])
            alphas[gid] = float(self.orders[best_idx[worst]])
            worst_units[gid] = int(worst)
        return epsilons, alphas, worst_units


def _teacher_group_index(plan: PlanResult, k: int) -> np.ndarray:
    stray = sorted({a.group_id for a in plan.assignments} - {g.group_id for g in plan.groups})
    if stray:
        raise InvalidParameterError(f"teachers assigned to unknown groups {stray}")
    out = np.full(k, -1)
    for gi, teachers in enumerate(plan.teacher_groups().values()):
        out[teachers] = gi
    return out


def _check_dimensions(votes: VoteMatrix, plan: PlanResult) -> VotingConfig:
    cfg = plan.scaled_config
    if votes.num_teachers != cfg.k:
        raise DimensionMismatchError(f"vote matrix has {votes.num_teachers} teachers, plan expects k={cfg.k}")
    if votes.num_classes != cfg.num_classes:
        raise DimensionMismatchError(
            f"vote matrix has {votes.num_classes} classes, plan expects {cfg.num_classes}")
    if len(plan.assignments) != cfg.k:
        raise InvalidParameterError(f"plan assigns {len(plan.assignments)} teachers, expected {cfg.k}")
    return cfg


def run_voting(votes: VoteMatrix, plan: PlanResult, config: RunConfig,
               query_order: Optional[Sequence[int]] = None) -> CostHistory:
    """
    Label queries in order until the label cap or the end of the matrix.

    Every group pays the consensus check at its loose bound (unless the gate
    is free) and, when the query is answered, the answer at its tight bound
    with loose fallback. Exhaustion is the first query where some group's
    converted epsilon exceeds its budget; recording continues afterwards.
    """
    cfg = _check_dimensions(votes, plan)
    variant = Variant(config.variant)
    if variant is not plan.variant:
        raise InvalidParameterError(f"run is {variant.value} but plan is {plan.variant.value}")
    if config.gate_accounting not in ("loose", "free"):
        raise InvalidParameterError(f"unknown gate accounting {config.gate_accounting!r}")

    orders = np.sort(np.asarray(config.orders, dtype=float))
    rows = np.arange(votes.num_queries) if query_order is None else np.asarray(query_order, dtype=int)
    k, m = cfg.k, cfg.num_classes

    weights = teacher_weights(plan.assignments, k) if variant is Variant.WEIGHTING else None
    schedule = None
    if variant is Variant.VANISHING:
        freqs = np.array([a.participation for a in sorted(plan.assignments, key=lambda a: a.teacher_id)])
        schedule = schedule_vanishing(freqs, rows.size, config.reshuffle_period,
                                      query_rng(config.seed, 0, SCHEDULE_STREAM))
        unit_groups = _teacher_group_index(plan, k)
    else:
        unit_groups = np.arange(len(plan.groups))

    group_ids = [g.group_id for g in plan.groups]
    sensitivities = np.array([g.sensitivity for g in plan.groups])
    ledger = _Ledger(unit_groups, group_ids, orders, cfg.delta)
    charge_gate = variant.gated and config.gate_accounting == "loose"
    gate_costs = np.stack([threshold_rdp_loose(s, cfg.sigma1, orders).costs for s in sensitivities])

    history = CostHistory(group_ids, {g.group_id: g.budget.epsilon for g in plan.groups}, cfg.label_cap)
    for step, row in enumerate(rows):
        if history.produced_label_count >= cfg.label_cap:
            break
        active = None if schedule is None else schedule[step]
        counts = build_vote_vector(votes.votes[row], plan.assignments, variant, m, active, weights)

        answered = True
        if variant.gated:
            answered = confident_gate(counts, cfg.sigma1, cfg.threshold, query_rng(config.seed, step, GATE_STREAM))
        label = gnmax(counts, cfg.sigma2, query_rng(config.seed, step, ANSWER_STREAM)) if answered else None

        unit_costs = np.zeros((len(plan.groups), orders.size))
        if charge_gate:
            unit_costs += gate_costs
        if answered:
            answer_costs = {}
            for gi, s in enumerate(sensitivities):
                if s not in answer_costs:
                    answer_costs[s] = per_query_cost(counts, s, cfg.sigma2, orders).costs
                unit_costs[gi] += answer_costs[s]

        if active is None:
            ledger.charge(np.arange(len(plan.groups)), unit_costs)
        else:
            # inactive teachers' data is not part of this voting
            ledger.charge(np.flatnonzero(active), unit_costs[unit_groups[active]])

        epsilons, alphas, _ = ledger.convert()
        if answered:
            history.produced_label_count += 1
        history.records.append(QueryRecord(step, int(row), answered, label, epsilons, alphas))

        if history.exhaustion is None:
            for g in plan.groups:
                gid = g.group_id
                if g.budget.exceeded_by(epsilons[gid]):
                    history.exhaustion = (step, gid)
                    logger.debug(f"⚠️ group {gid} exhausted at query {step}: {epsilons[gid]:.4f} > {history.budgets[gid]:.4f}")
                    break
            if history.exhaustion is not None and config.stop_at_exhaustion:
                break

    _, _, worst = ledger.convert()
    history.final_curves = {gid: ledger.curves[worst[gid]].copy() for gid in group_ids}
    logger.info(f"✅ {variant.value}: {count_labels_until_exhaustion(history)} labels before exhaustion, "
                f"{history.produced_label_count} produced over {len(history.records)} queries")
    return history


def count_labels_until_exhaustion(history: CostHistory) -> int:
    """Answered queries strictly before the exhaustion query (all of them if never exhausted)."""
    if history.exhaustion is None:
        return sum(1 for r in history.records if r.answered)
    cutoff = history.exhaustion[0]
    return sum(1 for r in history.records if r.answered and r.query_index < cutoff)


# === Repetitions ===

@dataclass(frozen=True)
class RunSummary:
    ensemble: int
    process: int
    labels_until_exhaustion: int
    labels_produced: int
    queries: int
    exhausted: bool
    exhaustion_query: Optional[int]
    exhaustion_group: Optional[str]
    final_epsilons: Dict[str, float]

    @classmethod
    def of(cls, ensemble: int, process: int, history: CostHistory) -> "RunSummary":
        exh = history.exhaustion
        return cls(ensemble, process, count_labels_until_exhaustion(history), history.produced_label_count,
                   len(history.records), exh is not None, None if exh is None else exh[0],
                   None if exh is None else exh[1], history.final_epsilons())


@dataclass(frozen=True)
class RepetitionSummary:
    runs: Tuple[RunSummary, ...]

    def merge(self, other: "RepetitionSummary") -> "RepetitionSummary":
        return RepetitionSummary(self.runs + other.runs)

    def label_counts(self) -> np.ndarray:
        return np.array([r.labels_until_exhaustion for r in self.runs], dtype=float)

    @property
    def mean_labels(self) -> float:
        return float(self.label_counts().mean())

    @property
    def std_labels(self) -> float:
        counts = self.label_counts()
        return float(counts.std(ddof=1)) if counts.size > 1 else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.runs:
            row = {
                "ensemble": r.ensemble,
                "process": r.process,
                "labels_until_exhaustion": r.labels_until_exhaustion,
                "labels_produced": r.labels_produced,
                "queries": r.queries,
                "exhausted": r.exhausted,
                "exhaustion_query": -1 if r.exhaustion_query is None else r.exhaustion_query,
                "exhaustion_group": r.exhaustion_group or "",
            }
            row.update({f"epsilon_{g}": e for g, e in sorted(r.final_epsilons.items())})
            rows.append(row)
        return pd.DataFrame(rows)


def mean_trajectories(histories: Sequence[CostHistory]) -> pd.DataFrame:
    """Mean spent epsilon per (query, group) across runs."""
    if not histories:
        return pd.DataFrame(columns=["query_index", "group_id", "epsilon_spent"])
    frames = [h.to_frame()[["query_index", "group_id", "epsilon_spent"]] for h in histories]
    return (pd.concat(frames).groupby(["query_index", "group_id"], sort=True)["epsilon_spent"]
            .mean().reset_index())


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def ensemble_votes(config: ExperimentConfig, plan: PlanResult, ensemble: int) -> VoteMatrix:
    """Votes of one teacher ensemble: the configured vote file, or a fresh synthetic ensemble."""
    sim = config.simulation
    if sim.votes_path:
        return load_votes(sim.votes_path)
    seed = derive_seed(config.seed, ensemble)
    rng = np.random.default_rng(seed)
    cfg = plan.scaled_config
    base = SyntheticEnsemble.uniform(config.voting.k, sim.teacher_accuracy, cfg.num_classes, sim.hard_query_rate)
    ensemble_model = expand_for_upsampling(base, cfg.k) if cfg.k != config.voting.k else base
    truth = sample_ground_truth(sim.num_queries, cfg.num_classes, rng)
    return sample_votes(ensemble_model, truth, rng)


def build_plan(config: ExperimentConfig) -> PlanResult:
    acc = config.accounting
    return plan_for_variant(config.variant, config.shares(), config.num_points, config.voting,
                            precision=acc.upsampling_precision, duplicate_cap=acc.duplicate_cap,
                            vanishing_exponent=acc.vanishing_exponent,
                            sigma_scaling=acc.vanishing_sigma_scaling)


def _run_ensemble(args) -> List[Tuple[RunSummary, CostHistory]]:
    config, plan, ensemble = args
    votes = ensemble_votes(config, plan, ensemble)
    out = []
    for process in range(config.voting_processes):
        voting_seed = derive_seed(config.seed, ensemble, process)
        order = np.random.default_rng(voting_seed).permutation(votes.num_queries)
        run_config = RunConfig(
            variant=config.variant,
            seed=voting_seed,
            orders=tuple(config.accounting.orders().tolist()),
            gate_accounting=config.accounting.gate_accounting,
            reshuffle_period=config.accounting.reshuffle_period,
            stop_at_exhaustion=config.accounting.stop_at_exhaustion,
            ensemble_seed=derive_seed(config.seed, ensemble),
        )
        history = run_voting(votes, plan, run_config, order)
        out.append((RunSummary.of(ensemble, process, history), history))
    return out


def repeat_and_aggregate(config: ExperimentConfig, plan: Optional[PlanResult] = None, jobs: int = 1,
                         progress: bool = False) -> Tuple[RepetitionSummary, List[CostHistory]]:
    """
    ensembles × voting_processes runs with seeds derived from config.seed.
    Results come back in repetition order whatever the number of jobs.
    """
    plan = plan or build_plan(config)
    tasks = [(config, plan, e) for e in range(config.ensembles)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(tqdm(pool.map(_run_ensemble, tasks), total=len(tasks), disable=not progress,
                                desc="ensembles"))
    else:
        results = [_run_ensemble(t) for t in tqdm(tasks, disable=not progress, desc="ensembles")]

    pairs = [pair for chunk in results for pair in chunk]
    summary = RepetitionSummary(tuple(s for s, _ in pairs))
    logger.info(f"📊 {config.variant.value}: {summary.mean_labels:.1f} ± {summary.std_labels:.1f} labels "
                f"over {len(pairs)} runs")
    return summary, [h for _, h in pairs]
