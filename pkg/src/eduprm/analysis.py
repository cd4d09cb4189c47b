"""Diagnostics over serialized decode trees.

Relative branch depth r = d / L (1-based branch-token index over the
containing leaf path's length) is the unit of analysis: one event per
(branch point, containing leaf path). Aggregations here binned counts of
r, branch-word frequency rankings, and threshold sweep tables feed the
CSV outputs a plotting tool consumes.

Pure aggregation; safe for unrestricted concurrent use.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .bon_eval import run_experiment
from .lm_core import Vocabulary
from .task_env import Task
from .tree_sampler import DecodeTree, Scorer, StrategyConfig, leaf_paths


@dataclass(frozen=True)
class BranchEvent:
    task_id: str
    token_index_d: int
    trace_length_L: int
    relative_depth_r: float
    branch_word: str


def relative_depths(trees: Sequence[DecodeTree], vocab: Vocabulary) -> List[BranchEvent]:
    """One event per branch point per containing leaf path."""
    events: List[BranchEvent] = []
    for tree in trees:
        for _, path, path_events in leaf_paths(tree):
            length = len(path)
            for ev in path_events:
                events.append(BranchEvent(
                    task_id=tree.task_id,
                    token_index_d=ev.position,
                    trace_length_L=length,
                    relative_depth_r=ev.position / length,
                    branch_word=vocab.surface(ev.token_id),
                ))
    return events


def depth_histogram(events: Sequence[BranchEvent], bins: int) -> np.ndarray:
    """Counts per uniform right-closed r-bin over (0, 1]; sums to len(events)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts = np.zeros(bins, dtype=np.int64)
    for ev in events:
        # right-closed bins; the tiny slack keeps exact boundaries like
        # r = k/bins out of the next bin despite float rounding
        idx = int(np.ceil(ev.relative_depth_r * bins - 1e-9)) - 1
        counts[min(max(idx, 0), bins - 1)] += 1
    return counts


def branch_word_frequency(events: Sequence[BranchEvent]) -> List[Tuple[str, int]]:
    """Branch-point words by descending count, lexicographic tie-break."""
    freq = {}
    for ev in events:
        freq[ev.branch_word] = freq.get(ev.branch_word, 0) + 1
    return sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    accuracy: float
    avg_tokens: float
    mean_relative_depth: float


def threshold_sweep(model, tasks: Sequence[Task], thresholds: Sequence[float],
                    base_config: StrategyConfig, scorer: Scorer, seed: int,
                    workers: int = 1) -> List[SweepRow]:
    """Accuracy / token / branch-depth table across entropy thresholds."""
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    rows = []
    for tau in thresholds:
        config = replace(base_config, policy=replace(base_config.policy, threshold_nats=tau))
        report = run_experiment(tasks, model, [config], scorer, seed, workers=workers)[0]
        rows.append(SweepRow(
            threshold=tau,
            accuracy=report.accuracy,
            avg_tokens=report.avg_tokens_per_task,
            mean_relative_depth=report.mean_relative_depth,
        ))
    return rows


def write_depth_hist_csv(path: str, threshold: float, counts: np.ndarray) -> None:
    bins = len(counts)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "bin_lo", "bin_hi", "count"])
        for i, c in enumerate(counts):
            w.writerow([f"{threshold:g}", f"{i / bins:.6f}", f"{(i + 1) / bins:.6f}", int(c)])


def write_branch_words_csv(path: str, ranking: Sequence[Tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["word", "count"])
        for word, count in ranking:
            w.writerow([word, count])


def write_sweep_csv(path: str, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "accuracy", "avg_tokens", "mean_r"])
        for r in rows:
            w.writerow([f"{r.threshold:g}", f"{r.accuracy:.6f}",
                        f"{r.avg_tokens:.3f}", f"{r.mean_relative_depth:.6f}"])
