"""Fragment labeling and PRM dataset emission.

Every tree node is one fragment (the token span between consecutive
branch points on a path). Internal fragments get a soft label equal to
the correct-leaf fraction of their subtree; terminal fragments get a
hard 0/1 label from their own verdict. By construction a node's label is
the leaf-count-weighted mean of its children's labels.

Labels default to the tree's own leaves as the Monte-Carlo completion
sample; pass ``extra`` to mix in additional sampled completions per node
when trees are thin.

Dataset records are line-delimited UTF-8 under the ``eduprm-dataset/1``
header: task_id, segment_index, prefix tokens, fragment tokens, label
(6 decimal places), label kind, tab-separated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import IO, List, Optional, Sequence, Tuple, Union

import numpy as np

from .lm_core import Vocabulary
from .task_env import Task, verify
from .tree_sampler import BranchNode, DecodeTree, _path_rng, _sample_token
from . import _kernels

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "eduprm-dataset/1"


class UnverifiedLeafError(ValueError):
    """A tree leaf carries no verdict; the tree was built without verification."""


@dataclass(frozen=True)
class Fragment:
    task_id: str
    path_prefix: Tuple[int, ...]  # up to and including this fragment
    fragment_span: Tuple[int, ...]
    segment_index: int


@dataclass(frozen=True)
class LabeledExample:
    fragment: Fragment
    label: float
    label_kind: str  # "soft" | "hard"


@dataclass(frozen=True)
class ExtraCompletions:
    """Adds k sampled completions per node to the label estimate."""
    model: object
    task: Task
    vocab: Vocabulary
    k: int
    temperature: float = 0.7
    seed: int = 0
    max_len: int = 256


def _leaf_stats(node: BranchNode) -> Tuple[int, int]:
    """(correct leaves, total leaves) under node, post-order."""
    if not node.children:
        if node.verdict is None:
            raise UnverifiedLeafError("leaf without verdict")
        return (1 if node.verdict.correct else 0), 1
    correct = total = 0
    for child in node.children:
        c, t = _leaf_stats(child)
        correct += c
        total += t
    return correct, total


def _extra_correct(extra: ExtraCompletions, prefix: List[int], key: Tuple[int, ...]) -> int:
    eos = extra.vocab.eos_id
    prompt = list(extra.task.prompt)
    correct = 0
    for j in range(extra.k):
        rng = _path_rng(extra.seed, key + (j,))
        sim = list(prefix)
        while len(sim) < extra.max_len and (not sim or sim[-1] != eos):
            logits = extra.model.next_logits(prompt, sim)
            probs = _kernels.softmax(np.ascontiguousarray(logits, dtype=np.float64), 1.0)
            greedy = int(_kernels.top2(probs)[0])
            sim.append(_sample_token(logits, extra.temperature, rng, greedy))
        if verify(extra.task, sim, extra.vocab).correct:
            correct += 1
    return correct


def label_tree(tree: DecodeTree, extra: Optional[ExtraCompletions] = None) -> List[LabeledExample]:
    """One example per node, emitted in path order (DFS, child 0 first)."""
    examples: List[LabeledExample] = []

    def walk(node: BranchNode, prefix: List[int], depth: int, key: Tuple[int, ...]):
        path = prefix + node.span
        fragment = Fragment(
            task_id=tree.task_id,
            path_prefix=tuple(path),
            fragment_span=tuple(node.span),
            segment_index=depth,
        )
        if not node.children:
            if node.verdict is None:
                raise UnverifiedLeafError(f"leaf without verdict in tree {tree.task_id}")
            examples.append(LabeledExample(
                fragment=fragment,
                label=1.0 if node.verdict.correct else 0.0,
                label_kind="hard",
            ))
            return
        correct, total = _leaf_stats(node)
        if extra is not None and extra.k > 0:
            correct += _extra_correct(extra, path, key)
            total += extra.k
        examples.append(LabeledExample(
            fragment=fragment, label=correct / total, label_kind="soft",
        ))
        for i, child in enumerate(node.children):
            walk(child, path, depth + 1, key + (i,))

    walk(tree.root, [], 0, ())
    return examples


def label_trees(trees: Sequence[DecodeTree]) -> List[LabeledExample]:
    out: List[LabeledExample] = []
    for tree in trees:
        out.extend(label_tree(tree))
    return out


def emit_dataset(examples: Sequence[LabeledExample],
                 destination: Union[str, IO[str]],
                 vocab: Vocabulary) -> int:
    """Write records; returns the count and logs the hard/soft ratio."""
    own = isinstance(destination, str)
    f = open(destination, "w", encoding="utf-8") if own else destination
    try:
        f.write(DATASET_SCHEMA + "\n")
        hard = 0
        for ex in examples:
            prefix = vocab.decode(ex.fragment.path_prefix)
            span = vocab.decode(ex.fragment.fragment_span)
            for s in prefix:
                if any(c.isspace() for c in s):
                    raise ValueError(f"surface {s!r} contains whitespace; "
                                     "dataset fields are space-joined")
            f.write("\t".join([
                ex.fragment.task_id,
                str(ex.fragment.segment_index),
                " ".join(prefix),
                " ".join(span),
                f"{ex.label:.6f}",
                ex.label_kind,
            ]) + "\n")
            hard += ex.label_kind == "hard"
    finally:
        if own:
            f.close()
    n = len(examples)
    if n:
        logger.info("emitted %d examples: %.1f%% hard / %.1f%% soft",
                    n, 100.0 * hard / n, 100.0 * (n - hard) / n)
    return n


def parse_dataset(source: Union[str, IO[str]], vocab: Vocabulary) -> List[LabeledExample]:
    own = isinstance(source, str)
    f = open(source, "r", encoding="utf-8") if own else source
    try:
        header = f.readline().rstrip("\n")
        if header != DATASET_SCHEMA:
            raise ValueError(f"unexpected dataset schema: {header!r}")
        out: List[LabeledExample] = []
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            task_id, seg, prefix, span, label, kind = line.split("\t")
            out.append(LabeledExample(
                fragment=Fragment(
                    task_id=task_id,
                    path_prefix=tuple(vocab.encode(prefix.split())),
                    fragment_span=tuple(vocab.encode(span.split())),
                    segment_index=int(seg),
                ),
                label=float(label),
                label_kind=kind,
            ))
    finally:
        if own:
            f.close()
    return out


def hard_fraction(examples: Sequence[LabeledExample]) -> float:
    if not examples:
        return 0.0
    return sum(e.label_kind == "hard" for e in examples) / len(examples)
