"""
Result files written by the command-line front end.

history CSV   one file per run, long format (query × group), versioned by
              its first line "# pate-history-format: 1"
summary CSV   one row per run plus mean and std rows, told apart by
              the statistic column
report CSV    plot-ready trajectories built from history files
plan JSON     PlanResult.to_dict()

Every writer goes through atomic_write so a crashed run never leaves a
half-written file behind.
"""

import json
import os
from typing import Iterable, List

import pandas as pd

from atomic_files import atomic_write
from errors import EmptyInputError, HistoryFormatError, InvalidParameterError
from planner import PlanResult
from run_logging import get_logger
from voting_engine import HISTORY_COLUMNS, CostHistory, RepetitionSummary

logger = get_logger("file_formats")

HISTORY_FORMAT_VERSION = 1
HISTORY_HEADER = f"# pate-history-format: {HISTORY_FORMAT_VERSION}"
REPORT_COLUMNS = ["query_index", "group_id", "epsilon_spent", "labels_so_far", "answered"]
FLOAT_FORMAT = "%.12g"
SUMMARY_NUMERIC_COLUMNS = ["labels_until_exhaustion", "labels_produced", "queries", "exhausted"]


# === 1. Cost history ===

def history_frame(history: CostHistory) -> pd.DataFrame:
    frame = history.to_frame()
    return frame.astype({"answered": int, "exhausted": int})


def write_history(history: CostHistory, path: str) -> str:
    frame = history_frame(history)

    def write(f):
        f.write(HISTORY_HEADER + "\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    atomic_write(path, write)
    logger.debug(f"💾 history written: {path}")
    return path


def read_history(path: str) -> pd.DataFrame:
    """History file back as a DataFrame; wrong version or columns raise HistoryFormatError."""
    if not os.path.exists(path):
        raise HistoryFormatError(f"history file not found: {path}")
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        if first != HISTORY_HEADER:
            raise HistoryFormatError(f"{path}: expected {HISTORY_HEADER!r} on the first line, got {first!r}")
        try:
            frame = pd.read_csv(f, dtype={"group_id": str})
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise HistoryFormatError(f"{path}: unreadable history table: {e}") from e
    if list(frame.columns) != HISTORY_COLUMNS:
        raise HistoryFormatError(f"{path}: columns {list(frame.columns)} differ from {HISTORY_COLUMNS}")
    if frame[["epsilon_spent", "labels_so_far"]].isna().any().any():
        raise HistoryFormatError(f"{path}: missing values in epsilon_spent or labels_so_far")
    return frame


# === 2. Report ===

def build_report(frames: Iterable[pd.DataFrame]) -> pd.DataFrame:
    """
    Plot-ready trajectories. With several histories the spent epsilon and the
    label count are averaged per (query, group) and answered becomes the
    fraction of runs that answered.
    """
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    if len(frames) == 1:
        report = frames[0][REPORT_COLUMNS].copy()
    else:
        report = (pd.concat(frames)
                  .groupby(["query_index", "group_id"], sort=True)[["epsilon_spent", "labels_so_far", "answered"]]
                  .mean().reset_index()[REPORT_COLUMNS])
    return report.sort_values(["query_index", "group_id"], kind="stable").reset_index(drop=True)


def write_report(report: pd.DataFrame, path: str) -> str:
    atomic_write(path, lambda f: report.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    logger.info(f"💾 report with {report['group_id'].nunique() if len(report) else 0} groups written: {path}")
    return path


# === 3. Summary ===

def summary_frame(summary: RepetitionSummary) -> pd.DataFrame:
    """
    One "run" row per repetition, then "mean" and "std" rows over the runs.

    The statistic column tells the rows apart; aggregate rows fill every
    numeric column and leave the run identifiers empty.
    """
    if not summary.runs:
        raise EmptyInputError("no runs to summarise")
    runs = summary.to_frame()
    runs["exhausted"] = runs["exhausted"].astype(int)
    numeric = SUMMARY_NUMERIC_COLUMNS + [c for c in runs.columns if c.startswith("epsilon_")]
    values = runs[numeric].astype(float)
    stats = pd.DataFrame([values.mean(), values.std(ddof=1).fillna(0.0)])
    stats.insert(0, "statistic", ["mean", "std"])
    runs.insert(0, "statistic", "run")
    frame = pd.concat([runs, stats], ignore_index=True)
    return frame.astype({"ensemble": "Int64", "process": "Int64", "exhaustion_query": "Int64"})


def write_summary(summary: RepetitionSummary, path: str) -> str:
    frame = summary_frame(summary)
    atomic_write(path, lambda f: frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    logger.info(f"💾 summary written: {path}")
    return path


# === 4. Plans ===

def save_plan(plan: PlanResult, path: str) -> str:
    atomic_write(path, lambda f: f.write(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n"))
    logger.info(f"💾 plan written: {path}")
    return path


def load_plan(path: str) -> PlanResult:
    if not os.path.exists(path):
        raise InvalidParameterError(f"plan file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidParameterError(f"{path}: invalid plan JSON at line {e.lineno}: {e.msg}") from e
    return PlanResult.from_dict(data)


def history_paths(directory: str) -> List[str]:
    """History files of a run directory in repetition order."""
    if not os.path.isdir(directory):
        raise HistoryFormatError(f"not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.startswith("history_") and n.endswith(".csv"))
    return [os.path.join(directory, n) for n in names]
