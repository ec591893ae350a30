import argparse
import filecmp
import io
import math
import os
import shutil
import sys
import tempfile
from typing import List, Optional, Sequence

from aggregators import Variant
from errors import ConfigError, PateError
from experiment_config import (PRESETS, BudgetShare, ExperimentConfig, load_config, save_config,
                               with_overrides)
from file_formats import (build_report, history_paths, load_plan, read_history, save_plan, write_history,
                          write_report, write_summary)
from rdp_accountant import data_independent_always_optimal
from run_logging import configure_logging, get_logger
from teacher_simulator import calibrate_accuracy, calibrate_hard_query_rate, write_votes
from voting_engine import build_plan, ensemble_votes, repeat_and_aggregate

# UTF-8 stdout/stderr
if __name__ == "__main__":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding="utf-8")
    sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding="utf-8")

logger = get_logger("generate")

# === Constants & file names inside a run directory ===
CONFIG_FILE = "config.json"
PLAN_FILE = "plan.json"
SUMMARY_FILE = "summary.csv"
REPORT_FILE = "report.csv"
VOTES_FILE = "votes.txt"


def history_file(ensemble: int, process: int) -> str:
    return f"history_e{ensemble:03d}_p{process:03d}.csv"


# === 1. Argument parsing ===

def parse_epsilon(token: str) -> float:
    """'0.69' or 'log2' (natural log of the number)."""
    token = token.strip()
    try:
        if token.startswith("log"):
            return math.log(float(token[3:]))
        return float(token)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an epsilon: {token!r} (use a number or e.g. log4)")


def parse_budget(text: str) -> BudgetShare:
    """EPSILON:RATIO, e.g. log4:0.5."""
    if ":" not in text:
        raise argparse.ArgumentTypeError(f"budget must look like EPSILON:RATIO, got {text!r}")
    eps, ratio = text.split(":", 1)
    try:
        return BudgetShare(parse_epsilon(eps), float(ratio))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad budget ratio in {text!r}")


def parse_fractions(text: str):
    """Comma-separated class frequencies, e.g. 0.1,0.2,0.7."""
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"class fractions must be comma-separated numbers, got {text!r}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="voting parameters of a known dataset")
    parser.add_argument("--variant", choices=[v.value for v in Variant])
    parser.add_argument("--budget", dest="budgets", action="append", type=parse_budget,
                        help="EPSILON:RATIO, repeatable (e.g. --budget log2:0.5 --budget log4:0.5)")
    parser.add_argument("--num-points", type=int)

    voting = parser.add_argument_group("voting")
    voting.add_argument("--k", type=int, help="number of teachers")
    voting.add_argument("--sigma1", type=float, help="consensus-check noise")
    voting.add_argument("--sigma2", type=float, help="answer noise")
    voting.add_argument("--threshold", type=float, help="consensus threshold T")
    voting.add_argument("--delta", type=float)
    voting.add_argument("--num-classes", type=int)
    voting.add_argument("--label-cap", type=int)

    sim = parser.add_argument_group("simulation")
    sim.add_argument("--num-queries", type=int)
    sim.add_argument("--teacher-accuracy", type=float)
    sim.add_argument("--hard-query-rate", type=float)
    sim.add_argument("--votes", dest="votes_path", help="vote-matrix file instead of simulated teachers")

    acc = parser.add_argument_group("accounting")
    acc.add_argument("--gate-accounting", choices=["loose", "free"])
    acc.add_argument("--min-order", type=int)
    acc.add_argument("--max-order", type=int)
    acc.add_argument("--vanishing-exponent", type=float)
    acc.add_argument("--vanishing-sigma-scaling", choices=["sqrt_active_fraction", "none"])
    acc.add_argument("--reshuffle-period", type=int)
    acc.add_argument("--duplicate-cap", type=int)
    acc.add_argument("--upsampling-precision", type=float)
    acc.add_argument("--stop-at-exhaustion", action="store_true", default=None)

    skew = parser.add_argument_group("class skew", "part of one class at a higher budget; --budget gives the base")
    skew.add_argument("--class-fractions", type=parse_fractions, help="class frequencies (default: equal)")
    skew.add_argument("--favored-class", type=int)
    skew.add_argument("--favored-ratio", type=float, help="share of the favored class at the higher budget")
    skew.add_argument("--favored-epsilon", type=parse_epsilon)

    rep = parser.add_argument_group("repetitions")
    rep.add_argument("--seed", type=int)
    rep.add_argument("--ensembles", type=int)
    rep.add_argument("--voting-processes", type=int)
    rep.add_argument("--output-dir")


OVERRIDE_KEYS = (
    "variant", "budgets", "num_points", "k", "sigma1", "sigma2", "threshold", "delta", "num_classes",
    "label_cap", "num_queries", "teacher_accuracy", "hard_query_rate", "votes_path", "gate_accounting",
    "min_order", "max_order", "vanishing_exponent", "vanishing_sigma_scaling", "reshuffle_period",
    "duplicate_cap", "upsampling_precision", "stop_at_exhaustion", "class_fractions", "favored_class",
    "favored_ratio", "favored_epsilon", "seed", "ensembles", "voting_processes", "output_dir",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="generate.py",
        description="Personalized PATE: plan budgets, simulate teacher votes, run privacy accounting.")
    parser.add_argument("--verbose", action="store_true", help="log every query")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="write the group plan for a budget distribution")
    add_config_flags(p)
    p.add_argument("--out", help="plan file (default <output-dir>/plan.json)")

    p = sub.add_parser("simulate", help="write a synthetic vote matrix")
    add_config_flags(p)
    p.add_argument("--ensemble", type=int, default=0, help="ensemble index to draw")
    p.add_argument("--out", help="vote file (default <output-dir>/votes.txt)")

    p = sub.add_parser("run", help="label queries and account privacy for every repetition")
    add_config_flags(p)
    p.add_argument("--plan", dest="plan_path", help="use this plan file instead of planning again")
    p.add_argument("--jobs", type=int, default=1, help="parallel ensembles")
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("replay", help="re-run a finished run directory and compare its files")
    p.add_argument("run_dir")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="plot-ready cost trajectories from history files")
    p.add_argument("paths", nargs="+", help="history files or run directories")
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="teacher accuracy or hard-query rate for a target voting accuracy")
    add_config_flags(p)
    p.add_argument("--target", type=float, default=0.977, help="plurality accuracy to reach")
    p.add_argument("--solve-for", choices=["accuracy", "hard_query_rate"], default="accuracy")
    p.add_argument("--calibration-queries", type=int, default=4000)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.preset:
        config = with_overrides(config, voting=PRESETS[args.preset])
    overrides = {key: getattr(args, key, None) for key in OVERRIDE_KEYS}
    if overrides.get("budgets") is not None:
        overrides["budgets"] = tuple(overrides["budgets"])
    return with_overrides(config, **overrides)


# === 2. Commands ===

def cmd_plan(config: ExperimentConfig, out: Optional[str] = None) -> str:
    plan = build_plan(config)
    path = out or os.path.join(config.output_dir, PLAN_FILE)
    save_plan(plan, path)
    for g in plan.groups:
        print(f"📊 {g.group_id}: epsilon={g.budget.epsilon:.6g} points={g.num_points} "
              f"param={g.param:.6g} sensitivity={g.sensitivity:.6g}")
    cfg = plan.scaled_config
    if data_independent_always_optimal(cfg.k, cfg.num_classes, cfg.sigma2, config.accounting.orders()).all():
        print(f"💡 sigma2={cfg.sigma2:.6g} drowns a unanimous vote of {cfg.k} teachers: "
              f"every answer pays the loose bound")
    print(f"✅ {plan.variant.value} plan (k={plan.scaled_config.k}, gain={plan.upsampling_gain:.6g}) → {path}")
    return path


def cmd_simulate(config: ExperimentConfig, ensemble: int = 0, out: Optional[str] = None) -> str:
    if config.simulation.votes_path:
        raise ConfigError("simulate draws synthetic votes; drop votes_path from the configuration")
    plan = build_plan(config)
    votes = ensemble_votes(config, plan, ensemble)
    path = out or os.path.join(config.output_dir, VOTES_FILE)
    write_votes(votes, path)
    print(f"✅ {votes.num_queries} queries x {votes.num_teachers} teachers → {path}")
    return path


def cmd_run(config: ExperimentConfig, plan_path: Optional[str] = None, jobs: int = 1,
            progress: bool = False) -> List[str]:
    """Write config, plan, one history per repetition and the summary into output_dir."""
    plan = load_plan(plan_path) if plan_path else build_plan(config)
    if plan.variant is not config.variant:
        raise ConfigError(f"plan is for {plan.variant.value}, configuration asks for {config.variant.value}")

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    written = [save_config(config, os.path.join(out_dir, CONFIG_FILE)), save_plan(plan, os.path.join(out_dir, PLAN_FILE))]

    summary, histories = repeat_and_aggregate(config, plan, jobs=jobs, progress=progress)
    for run, history in zip(summary.runs, histories):
        written.append(write_history(history, os.path.join(out_dir, history_file(run.ensemble, run.process))))
    written.append(write_summary(summary, os.path.join(out_dir, SUMMARY_FILE)))

    print(f"📊 labels until exhaustion: {summary.mean_labels:.2f} ± {summary.std_labels:.2f} "
          f"over {len(summary.runs)} runs")
    print(f"✅ {len(written)} files written to {out_dir}")
    return written


def cmd_replay(run_dir: str, jobs: int = 1) -> List[str]:
    """Files of run_dir that a fresh run of its saved config does not reproduce byte for byte."""
    config = load_config(os.path.join(run_dir, CONFIG_FILE))
    plan_path = os.path.join(run_dir, PLAN_FILE)
    scratch = tempfile.mkdtemp(prefix="pate_replay_")
    try:
        replayed = with_overrides(config, output_dir=scratch)
        cmd_run(replayed, plan_path if os.path.exists(plan_path) else None, jobs)
        differing = []
        for name in sorted(os.listdir(scratch)):
            original = os.path.join(run_dir, name)
            if name == CONFIG_FILE:
                continue
            if not os.path.exists(original) or not filecmp.cmp(original, os.path.join(scratch, name), shallow=False):
                differing.append(name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)

    if differing:
        print(f"❌ {len(differing)} files differ: {', '.join(differing)}")
    else:
        print(f"✅ replay of {run_dir} is byte-identical")
    return differing


def cmd_report(paths: Sequence[str], out: str) -> str:
    files = []
    for path in paths:
        files.extend(history_paths(path) if os.path.isdir(path) else [path])
    report = build_report(read_history(p) for p in files)
    write_report(report, out)
    print(f"✅ report over {len(files)} histories → {out}")
    return out


def cmd_calibrate(config: ExperimentConfig, target: float, solve_for: str, num_queries: int) -> float:
    k, m = config.voting.k, config.voting.num_classes
    if solve_for == "accuracy":
        value = calibrate_accuracy(k, m, target, num_queries, config.seed, config.simulation.hard_query_rate)
        print(f"📊 teacher_accuracy = {value:.6f}")
    else:
        value = calibrate_hard_query_rate(k, m, config.simulation.teacher_accuracy, target, num_queries, config.seed)
        print(f"📊 hard_query_rate = {value:.6f}")
    return value


# === 3. Entry point ===

def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "report":
            cmd_report(args.paths, args.out)
        elif args.command == "replay":
            return 1 if cmd_replay(args.run_dir, args.jobs) else 0
        else:
            config = resolve_config(args)
            if args.command == "plan":
                cmd_plan(config, args.out)
            elif args.command == "simulate":
                cmd_simulate(config, args.ensemble, args.out)
            elif args.command == "run":
                cmd_run(config, args.plan_path, args.jobs, args.progress)
            elif args.command == "calibrate":
                cmd_calibrate(config, args.target, args.solve_for, args.calibration_queries)
    except PateError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        if e.remedy:
            print(f"💡 {e.remedy}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"error: internal: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
