"""Shared fixtures: the tuned ngram task suite and scripted scenarios."""

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import pytest

from eduprm import _kernels
from eduprm.lm_core import TableModel, Vocabulary, train_ngram
from eduprm.task_env import Task, build_vocabulary, generate_tasks, reference_trace
from eduprm.prm import make_oracle_scorer


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    _kernels.warmup()


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return build_vocabulary()


@dataclass
class Suite:
    vocab: Vocabulary
    model: object
    tasks: List[Task]          # evaluation tasks
    train_tasks: List[Task]    # disjoint tasks for PRM training
    oracle: object


def build_suite_model(vocab, seed=99, order=8, smoothing=0.06,
                      sizes=((1, 3000), (2, 14000))):
    rng = np.random.default_rng(seed)
    corpus = []
    for diff, n in sizes:
        for t in generate_tasks("chain-arithmetic", n, diff, 1000 + diff, vocab):
            corpus.append(list(t.prompt) + reference_trace(t, vocab, rng))
    return train_ngram(corpus, order=order, smoothing=smoothing, vocab=vocab)


@pytest.fixture(scope="session")
def suite(vocab) -> Suite:
    """Chain-arithmetic suite with a well-covered difficulty-2 corpus."""
    model = build_suite_model(vocab)
    return Suite(
        vocab=vocab,
        model=model,
        tasks=generate_tasks("chain-arithmetic", 200, 2, 42, vocab),
        train_tasks=generate_tasks("chain-arithmetic", 150, 2, 777, vocab),
        oracle=make_oracle_scorer(model, vocab),
    )


# ---------------------------------------------------------------------------
# Scripted table models
# ---------------------------------------------------------------------------

def peaked_row(vocab: Vocabulary, token_id: int) -> np.ndarray:
    row = np.full(vocab.size, -12.0)
    row[token_id] = 8.0
    return row


def flat_top2_row(vocab: Vocabulary, first_id: int, second_id: int,
                  spread: float = -4.0) -> np.ndarray:
    """High-entropy row whose top-2 are the given ids."""
    row = np.full(vocab.size, spread)
    row[first_id] = 1.0
    row[second_id] = 0.9
    return row


def positional_table(vocab: Vocabulary, row_for_position, max_positions: int,
                     identity: str = "scripted") -> TableModel:
    """Table covering every prefix reachable through top-2 choices, with
    the row at each position given by ``row_for_position(pos)``."""
    rules: Dict[Tuple[int, ...], np.ndarray] = {}
    frontier = [()]
    for pos in range(max_positions):
        row = row_for_position(pos)
        nxt = []
        a, b = _kernels.top2(np.exp(row - row.max()) / np.exp(row - row.max()).sum())
        for prefix in frontier:
            rules[prefix] = row
            for tok in (int(a), int(b)):
                if tok != vocab.eos_id:
                    nxt.append(prefix + (tok,))
        frontier = nxt
        if not frontier:
            break
    return TableModel(vocab=vocab, rules=rules, default=peaked_row(vocab, vocab.eos_id),
                      identity=identity)


# ---------------------------------------------------------------------------
# Delayed-reward scenario: at the first branch the tempting child leads to
# a wrong answer; only a deeper lookahead reveals the other child's value.
# ---------------------------------------------------------------------------

@dataclass
class DelayedRewardScenario:
    task: Task
    model: TableModel
    scorer_table: Dict[Tuple[int, ...], float]
    trap_first: int    # first token of the tempting (wrong) path
    good_first: int    # first token of the delayed-reward (right) path


def delayed_reward_scenario(vocab: Vocabulary, a: int, b: int,
                            index: int = 0) -> DelayedRewardScenario:
    assert 0 <= a + b <= 8
    right = str(a + b)
    wrong = str(a + b + 1)
    prompt = tuple(vocab.encode(["eval", ":", str(a), "+", str(b), ";"]))
    task = Task(id=f"trap-{index:03d}", prompt=prompt,
                reference_answer=right, family="chain-arithmetic")

    def path(first: str, filler: str, answer: str) -> List[List[int]]:
        segs = [
            [first, filler, "+", "0", ";"],
            [filler, "+", "0", ";"],
            ["=", answer, "done", "<eos>"],
        ]
        return [vocab.encode(s) for s in segs]

    trap = path("so", str(a), wrong)      # scores fade with depth
    good = path("then", str(b), right)    # scores grow with depth
    decoy = vocab.id("note")

    rules: Dict[Tuple[int, ...], np.ndarray] = {}
    scorer_table: Dict[Tuple[int, ...], float] = {}
    rules[()] = flat_top2_row(vocab, trap[0][0], good[0][0], spread=-12.0)
    for segs, seg_scores in ((trap, (0.9, 0.2, 0.1)), (good, (0.5, 0.8, 0.9))):
        full: List[int] = []
        boundaries = set()
        for seg in segs[:-1]:
            full.extend(seg)
            boundaries.add(len(full))
        full.extend(segs[-1])
        for i in range(1, len(full)):
            prefix = tuple(full[:i])
            if i in boundaries:
                rules[prefix] = flat_top2_row(vocab, full[i], decoy)
            else:
                rules[prefix] = peaked_row(vocab, full[i])
        ends = sorted(boundaries) + [len(full)]
        for end, score in zip(ends, seg_scores):
            scorer_table[tuple(full[:end])] = score

    model = TableModel(vocab=vocab, rules=rules,
                       default=peaked_row(vocab, vocab.eos_id),
                       identity=f"trap-{index}")
    return DelayedRewardScenario(
        task=task, model=model, scorer_table=scorer_table,
        trap_first=trap[0][0], good_first=good[0][0],
    )
