"""Best-of-N selection and strategy comparison reports.

For tree strategies the candidate set is the tree's surviving leaf
paths; for high-temperature sampling it is the independent traces. The
chosen candidate's verdict feeds per-strategy accuracy, next to exact
token accounting and branch-depth statistics, one report row per
strategy configuration.

Tasks are independent work units; a ``workers`` pool only parallelizes
across tasks and results merge in task order, so reports are identical
for any worker count.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .lm_core import Vocabulary
from .task_env import Task, Verdict, normalize_answer
from .tree_sampler import (
    DecodeTree, Scorer, StrategyConfig, build_tree, leaf_paths, surviving_leaves,
)


@dataclass(frozen=True)
class CandidateSet:
    task: Task
    traces: Tuple[Tuple[int, ...], ...]
    token_counts: Tuple[int, ...]
    verdicts: Tuple[Verdict, ...]

    def __post_init__(self):
        if not self.traces:
            raise ValueError("empty candidate set")


@dataclass(frozen=True)
class StrategyReport:
    label: str
    kind: str
    n: int
    threshold: float
    accuracy: float
    total_tokens: int
    avg_tokens_per_task: float
    branch_events: int
    mean_relative_depth: float
    tasks: int
    repeats: int


def candidate_set(tree: DecodeTree, task: Task, surviving_only: bool = False) -> CandidateSet:
    paths = surviving_leaves(tree) if surviving_only else list(leaf_paths(tree))
    return CandidateSet(
        task=task,
        traces=tuple(tuple(p) for _, p, _ in paths),
        token_counts=tuple(len(p) for _, p, _ in paths),
        verdicts=tuple(leaf.verdict for leaf, _, _ in paths),
    )


def select_bon(candidates: CandidateSet, scorer: Scorer) -> int:
    """Argmax of the full-trace score; ties go to the lowest index."""
    best = 0
    best_score = scorer(candidates.task, candidates.traces[0])
    for i in range(1, len(candidates.traces)):
        s = scorer(candidates.task, candidates.traces[i])
        if s > best_score:
            best, best_score = i, s
    return best


def select_majority(candidates: CandidateSet) -> int:
    """Lowest index within the largest answer group; group-size ties go to
    the earliest-first-seen group."""
    groups: Dict[Optional[str], List[int]] = {}
    order: List[Optional[str]] = []
    for i, v in enumerate(candidates.verdicts):
        key = None if v.extracted_answer is None else normalize_answer(v.extracted_answer)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    best_key = order[0]
    for key in order[1:]:
        if len(groups[key]) > len(groups[best_key]):
            best_key = key
    return groups[best_key][0]


def select_random(candidates: CandidateSet, rng: np.random.Generator) -> int:
    return int(rng.integers(0, len(candidates.traces)))


def select_first(candidates: CandidateSet) -> int:
    return 0


@dataclass
class TaskOutcome:
    correct: bool
    tokens: int
    branch_events: int
    depth_sum: float
    depth_count: int


def _relative_depth_stats(tree: DecodeTree) -> Tuple[int, float, int]:
    """(#branching nodes, sum of r over per-leaf events, #events)."""
    depth_sum = 0.0
    count = 0
    for _, path, events in leaf_paths(tree):
        length = len(path)
        for ev in events:
            depth_sum += ev.position / length
            count += 1
    unique = 0
    stack = [tree.root]
    while stack:
        n = stack.pop()
        if n.children and n.children[0].branch_token_id is not None:
            unique += 1
        stack.extend(n.children)
    return unique, depth_sum, count


def run_strategy_on_task(model, task: Task, config: StrategyConfig, scorer: Scorer,
                         seed: int) -> TaskOutcome:
    """Build the strategy's tree for one task, pick its answer, verify."""
    needs_scorer = config.kind in ("p_edu", "mcts_edu")
    tree = build_tree(model, task, config, seed, scorer=scorer if needs_scorer else None)
    cands = candidate_set(tree, task, surviving_only=needs_scorer)
    choice = select_bon(cands, scorer)
    unique, depth_sum, depth_count = _relative_depth_stats(tree)
    return TaskOutcome(
        correct=cands.verdicts[choice].correct,
        tokens=tree.total_tokens,
        branch_events=unique,
        depth_sum=depth_sum,
        depth_count=depth_count,
    )


def derive_task_seed(seed: int, repeat: int, index: int) -> int:
    """Stable per-(repeat, task) seed, independent of execution order."""
    ss = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(repeat, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def strategy_label(config: StrategyConfig) -> str:
    n = config.n_samples if config.kind == "ht_bon" else config.policy.max_branches
    return f"{config.kind}[n={n},t={config.policy.threshold_nats:g}]"


def run_experiment(tasks: Sequence[Task], model, strategies: Sequence[StrategyConfig],
                   scorer: Scorer, seed: int, workers: int = 1,
                   repeats: int = 1) -> List[StrategyReport]:
    """One report per strategy; deterministic for any worker count."""
    if not tasks:
        raise ValueError("no tasks")
    if not strategies:
        raise ValueError("no strategies")
    reports = []
    for config in strategies:
        jobs = [(rep, i) for rep in range(repeats) for i in range(len(tasks))]

        def one(job: Tuple[int, int]) -> TaskOutcome:
            rep, i = job
            try:
                return run_strategy_on_task(model, tasks[i], config, scorer,
                                            derive_task_seed(seed, rep, i))
            except Exception as e:
                raise RuntimeError(f"strategy {config.kind} failed on task "
                                   f"{tasks[i].id}: {e}") from e

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(one, jobs))
        else:
            outcomes = [one(j) for j in jobs]

        n_correct = sum(o.correct for o in outcomes)
        total_tokens = sum(o.tokens for o in outcomes)
        depth_sum = sum(o.depth_sum for o in outcomes)
        depth_count = sum(o.depth_count for o in outcomes)
        reports.append(StrategyReport(
            label=strategy_label(config),
            kind=config.kind,
            n=config.n_samples if config.kind == "ht_bon" else config.policy.max_branches,
            threshold=config.policy.threshold_nats,
            accuracy=n_correct / len(jobs),
            total_tokens=total_tokens,
            avg_tokens_per_task=total_tokens / len(jobs),
            branch_events=sum(o.branch_events for o in outcomes),
            mean_relative_depth=depth_sum / depth_count if depth_count else 0.0,
            tasks=len(tasks),
            repeats=repeats,
        ))
    return reports


def write_reports_csv(path: str, reports: Sequence[StrategyReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "kind", "n", "threshold", "accuracy",
                    "total_tokens", "avg_tokens", "mean_relative_branch_depth",
                    "branch_events", "tasks", "repeats"])
        for r in reports:
            w.writerow([
                r.label, r.kind, r.n, f"{r.threshold:g}", f"{r.accuracy:.6f}",
                r.total_tokens, f"{r.avg_tokens_per_task:.3f}",
                f"{r.mean_relative_depth:.6f}", r.branch_events, r.tasks, r.repeats,
            ])
