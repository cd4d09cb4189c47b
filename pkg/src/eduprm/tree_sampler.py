"""Decoding-tree construction under five sampling strategies.

* ``edu``        -- greedy decoding with top-2 branches at uncertainty
                    anchors (the first generated position branches
                    unconditionally when budget and whitelist allow),
* ``sample_edu`` -- same branching, temperature sampling between anchors,
* ``p_edu``      -- edu with score-based pruning of low-confidence
                    branches (at least one live path is always retained),
* ``mcts_edu``   -- edu branching where a depth-limited greedy lookahead,
                    scored segment by segment, commits one child per
                    anchor,
* ``ht_bon``     -- n independent temperature-sampled traces, kept as a
                    degenerate one-level tree.

Budget rules shared by the edu family: a tree never exceeds
``max_branches`` leaves, and no root-to-leaf path carries more than
ceil(log2(max_branches)) branch events, which is what keeps per-path
token cost logarithmic in the leaf budget. Trees are deterministic
functions of (model, task, config, seed); sampled segments draw from
per-path generators derived from the seed, so concurrent or sequential
construction yields identical trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .entropy_anchor import AnchorPolicy, decide_anchor, softmax_entropy, top2_ids
from .lm_core import Vocabulary
from .task_env import Task, Verdict, verify

TREES_SCHEMA = "eduprm-trees/1"

STRATEGY_KINDS = ("edu", "sample_edu", "p_edu", "mcts_edu", "ht_bon")

Scorer = Callable[[Task, Sequence[int]], float]


@dataclass
class StrategyConfig:
    kind: str
    policy: AnchorPolicy
    temperature: float = 0.7
    prune_threshold: float = 0.2
    rollout_depth: int = 3
    n_samples: int = 8
    max_len: int = 256
    prune_first_branch_only: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 <= self.prune_threshold <= 1.0:
            raise ValueError("prune_threshold must be in [0, 1]")
        if self.rollout_depth < 1:
            raise ValueError("rollout_depth must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "threshold_nats": self.policy.threshold_nats,
            "epsilon": self.policy.epsilon,
            "max_branches": self.policy.max_branches,
            "whitelist": sorted(self.policy.whitelist),
            "max_len": self.max_len,
        }
        if self.kind in ("sample_edu", "ht_bon"):
            d["temperature"] = self.temperature
        if self.kind == "p_edu":
            d["prune_threshold"] = self.prune_threshold
            d["prune_first_branch_only"] = self.prune_first_branch_only
        if self.kind == "mcts_edu":
            d["rollout_depth"] = self.rollout_depth
        if self.kind == "ht_bon":
            d["n_samples"] = self.n_samples
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        policy = AnchorPolicy(
            threshold_nats=d["threshold_nats"],
            epsilon=d["epsilon"],
            whitelist=frozenset(d["whitelist"]),
            max_branches=d["max_branches"],
        )
        return cls(
            kind=d["kind"],
            policy=policy,
            temperature=d.get("temperature", 0.7),
            prune_threshold=d.get("prune_threshold", 0.2),
            rollout_depth=d.get("rollout_depth", 3),
            n_samples=d.get("n_samples", 8),
            max_len=d.get("max_len", 256),
            prune_first_branch_only=d.get("prune_first_branch_only", False),
        )


@dataclass
class BranchNode:
    span: List[int]
    branch_token_id: Optional[int] = None
    entropy_at_branch: Optional[float] = None
    children: List["BranchNode"] = field(default_factory=list)
    terminal: bool = False
    verdict: Optional[Verdict] = None
    pruned: bool = False


@dataclass
class DecodeTree:
    task_id: str
    root: BranchNode
    leaf_count: int
    total_tokens: int
    strategy: StrategyConfig
    seed: int
    rollout_tokens: int = 0


def depth_cap(max_branches: int) -> int:
    """Max branch events per root-to-leaf path: ceil(log2(max_branches))."""
    return (max_branches - 1).bit_length() if max_branches > 1 else 0


def _path_rng(seed: int, key: Tuple[int, ...]) -> np.random.Generator:
    ss = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.default_rng(ss)


def _sample_token(logits: np.ndarray, temperature: float,
                  rng: np.random.Generator, greedy_id: int) -> int:
    if temperature <= 0.0:
        return greedy_id
    probs = _kernels.softmax(np.ascontiguousarray(logits, dtype=np.float64), temperature)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def _spans_total(root: BranchNode) -> int:
    total = 0
    stack = [root]
    while stack:
        n = stack.pop()
        total += len(n.span)
        stack.extend(n.children)
    return total


def _count_leaves(root: BranchNode) -> int:
    count = 0
    stack = [root]
    while stack:
        n = stack.pop()
        if not n.children:
            count += 1
        else:
            stack.extend(n.children)
    return count


def _build_branching(model, task: Task, config: StrategyConfig, seed: int) -> DecodeTree:
    """Shared engine for edu / sample_edu (DFS, child-0 first)."""
    vocab: Vocabulary = model.vocab
    policy = config.policy
    eos = vocab.eos_id
    prompt = list(task.prompt)
    cap = depth_cap(policy.max_branches)
    sampled = config.kind == "sample_edu"

    root = BranchNode(span=[])
    leaf_count = 1
    # (node being extended, generated prefix, branch events on path, path key)
    stack: List[Tuple[BranchNode, List[int], int, Tuple[int, ...]]] = [(root, [], 0, ())]
    while stack:
        node, prefix, events, key = stack.pop()
        rng = _path_rng(seed, key) if sampled else None
        while True:
            if len(prefix) >= config.max_len:
                node.terminal = True
                node.verdict = verify(task, prefix, vocab)
                break
            logits = model.next_logits(prompt, prefix)
            dist = softmax_entropy(logits, policy.epsilon)
            t0, t1 = top2_ids(dist.probs)
            budget = policy.max_branches - leaf_count
            if len(prefix) == 0:
                want_branch = budget > 0  # first position branches unconditionally
            else:
                want_branch = decide_anchor(dist, vocab.surface(t0), policy, budget).is_anchor
            allowed = (
                budget > 0
                and events < cap
                and vocab.surface(t0) not in policy.whitelist
                and vocab.surface(t1) not in policy.whitelist
            )
            if want_branch and allowed:
                leaf_count += 1
                children = []
                for tok in (t0, t1):
                    children.append(BranchNode(
                        span=[tok], branch_token_id=tok,
                        entropy_at_branch=dist.entropy_nats,
                    ))
                node.children = children
                for i in (1, 0):  # push child 1 first so child 0 expands first
                    child = children[i]
                    child_prefix = prefix + [child.span[0]]
                    if child.span[0] == eos or len(child_prefix) >= config.max_len:
                        child.terminal = True
                        child.verdict = verify(task, child_prefix, vocab)
                    else:
                        stack.append((child, child_prefix, events + 1, key + (i,)))
                break
            tok = t0 if not sampled else _sample_token(logits, config.temperature, rng, t0)
            node.span.append(tok)
            prefix.append(tok)
            if tok == eos:
                node.terminal = True
                node.verdict = verify(task, prefix, vocab)
                break
    return DecodeTree(
        task_id=task.id, root=root, leaf_count=_count_leaves(root),
        total_tokens=_spans_total(root), strategy=config, seed=seed,
    )


def build_edu_tree(model, task: Task, config: StrategyConfig, seed: int = 0) -> DecodeTree:
    if config.kind != "edu":
        raise ValueError("config.kind must be 'edu'")
    return _build_branching(model, task, config, seed)


def build_sample_edu_tree(model, task: Task, config: StrategyConfig, seed: int = 0) -> DecodeTree:
    if config.kind != "sample_edu":
        raise ValueError("config.kind must be 'sample_edu'")
    return _build_branching(model, task, config, seed)


def build_pruned_tree(model, task: Task, config: StrategyConfig, scorer: Scorer,
                      seed: int = 0) -> DecodeTree:
    """Branch-and-prune: the branching schedule is exactly the unpruned
    tree's; each new child's partial path is scored and children under
    the threshold are cut back to one-token stubs rather than expanded.
    Cutting never redirects branch budget, so total_tokens can only
    shrink, and when both children fall under the threshold while no
    other live path remains, the higher-scoring child is kept."""
    if config.kind != "p_edu":
        raise ValueError("config.kind must be 'p_edu'")
    vocab: Vocabulary = model.vocab
    base = _build_branching(model, task, replace(config, kind="edu"), seed)
    root = base.root
    # (node, generated prefix up to and including node span, first branch?)
    stack: List[Tuple[BranchNode, List[int], bool]] = [(root, list(root.span), True)]
    while stack:
        node, path, first = stack.pop()
        if not node.children:
            continue
        c0, c1 = node.children
        gate = first or not config.prune_first_branch_only
        live = [True, True]
        if gate:
            scores = [scorer(task, path + [c0.span[0]]), scorer(task, path + [c1.span[0]])]
            live = [s >= config.prune_threshold for s in scores]
            if not any(live) and not stack:
                # every pending entry either survives or reaches this same
                # protected decision, so an empty stack is the last chance
                # to keep a live path
                live[0 if scores[0] >= scores[1] else 1] = True
        for i, child in enumerate((c0, c1)):
            if live[i]:
                stack.append((child, path + child.span, False))
            else:
                branch_tok = child.span[0]
                child.span = [branch_tok]
                child.children = []
                child.pruned = True
                child.terminal = True
                child.verdict = verify(task, path + [branch_tok], vocab)
    return DecodeTree(
        task_id=task.id, root=root, leaf_count=_count_leaves(root),
        total_tokens=_spans_total(root), strategy=config, seed=seed,
    )


def _rollout_value(model, task: Task, config: StrategyConfig, scorer: Scorer,
                   sim_prefix: List[int]) -> Tuple[float, int]:
    """Greedy lookahead from sim_prefix, scored at up to rollout_depth
    anchor boundaries; returns (mean score, tokens generated)."""
    vocab: Vocabulary = model.vocab
    policy = config.policy
    eos = vocab.eos_id
    prompt = list(task.prompt)
    sim = list(sim_prefix)
    tokens = 0
    scores: List[float] = []
    terminal = sim[-1] == eos or len(sim) >= config.max_len
    boundary_token: Optional[int] = None
    while len(scores) < config.rollout_depth and not terminal:
        while True:
            if len(sim) >= config.max_len:
                terminal = True
                break
            logits = model.next_logits(prompt, sim)
            dist = softmax_entropy(logits, policy.epsilon)
            t0, _ = top2_ids(dist.probs)
            if decide_anchor(dist, vocab.surface(t0), policy, 1).is_anchor:
                boundary_token = t0
                break
            sim.append(t0)
            tokens += 1
            if t0 == eos:
                terminal = True
                break
        scores.append(scorer(task, sim))
        if not terminal and len(scores) < config.rollout_depth:
            # step over the boundary greedily to enter the next segment
            sim.append(boundary_token)
            tokens += 1
            if boundary_token == eos or len(sim) >= config.max_len:
                terminal = True
    if not scores:
        scores.append(scorer(task, sim))
    return float(np.mean(scores)), tokens


def build_mcts_tree(model, task: Task, config: StrategyConfig, scorer: Scorer,
                    seed: int = 0) -> DecodeTree:
    """One committed path; at each anchor a depth-limited lookahead picks
    the child, the other child stays as a terminal stub. total_tokens
    includes the lookahead (rollout) tokens on top of tree spans."""
    if config.kind != "mcts_edu":
        raise ValueError("config.kind must be 'mcts_edu'")
    vocab: Vocabulary = model.vocab
    policy = config.policy
    eos = vocab.eos_id
    prompt = list(task.prompt)
    cap = depth_cap(policy.max_branches)

    root = BranchNode(span=[])
    node = root
    prefix: List[int] = []
    events = 0
    leaf_count = 1
    rollout_tokens = 0
    while True:
        if len(prefix) >= config.max_len:
            node.terminal = True
            node.verdict = verify(task, prefix, vocab)
            break
        logits = model.next_logits(prompt, prefix)
        dist = softmax_entropy(logits, policy.epsilon)
        t0, t1 = top2_ids(dist.probs)
        budget = policy.max_branches - leaf_count
        if len(prefix) == 0:
            want_branch = budget > 0
        else:
            want_branch = decide_anchor(dist, vocab.surface(t0), policy, budget).is_anchor
        allowed = (
            budget > 0
            and events < cap
            and vocab.surface(t0) not in policy.whitelist
            and vocab.surface(t1) not in policy.whitelist
        )
        if want_branch and allowed:
            values = []
            for tok in (t0, t1):
                v, sim_tokens = _rollout_value(model, task, config, scorer, prefix + [tok])
                rollout_tokens += sim_tokens
                values.append(v)
            pick = 0 if values[0] >= values[1] else 1  # tie keeps higher-probability child
            children = []
            for i, tok in enumerate((t0, t1)):
                children.append(BranchNode(
                    span=[tok], branch_token_id=tok,
                    entropy_at_branch=dist.entropy_nats,
                ))
            node.children = children
            leaf_count += 1
            events += 1
            stub = children[1 - pick]
            stub.pruned = True
            stub.terminal = True
            stub.verdict = verify(task, prefix + [stub.span[0]], vocab)
            node = children[pick]
            prefix = prefix + [node.span[0]]
            if node.span[0] == eos or len(prefix) >= config.max_len:
                node.terminal = True
                node.verdict = verify(task, prefix, vocab)
                break
            continue
        tok = t0
        node.span.append(tok)
        prefix.append(tok)
        if tok == eos:
            node.terminal = True
            node.verdict = verify(task, prefix, vocab)
            break
    return DecodeTree(
        task_id=task.id, root=root, leaf_count=_count_leaves(root),
        total_tokens=_spans_total(root) + rollout_tokens, strategy=config,
        seed=seed, rollout_tokens=rollout_tokens,
    )


def build_ht_candidates(model, task: Task, config: StrategyConfig, seed: int = 0) -> DecodeTree:
    """n_samples independent tempered traces as a one-level tree (the
    chain children are exempt from the two-child branching invariant)."""
    if config.kind != "ht_bon":
        raise ValueError("config.kind must be 'ht_bon'")
    vocab: Vocabulary = model.vocab
    eos = vocab.eos_id
    prompt = list(task.prompt)
    root = BranchNode(span=[])
    for i in range(config.n_samples):
        rng = _path_rng(seed, (i,))
        trace: List[int] = []
        while len(trace) < config.max_len:
            logits = model.next_logits(prompt, trace)
            probs = _kernels.softmax(np.ascontiguousarray(logits, dtype=np.float64), 1.0)
            greedy = _kernels.top2(probs)[0]
            tok = _sample_token(logits, config.temperature, rng, int(greedy))
            trace.append(tok)
            if tok == eos:
                break
        root.children.append(BranchNode(
            span=trace, terminal=True, verdict=verify(task, trace, vocab),
        ))
    return DecodeTree(
        task_id=task.id, root=root, leaf_count=len(root.children),
        total_tokens=_spans_total(root), strategy=config, seed=seed,
    )


def build_tree(model, task: Task, config: StrategyConfig, seed: int = 0,
               scorer: Optional[Scorer] = None) -> DecodeTree:
    """Dispatch on config.kind; scorer is required for p_edu and mcts_edu."""
    if config.kind == "edu":
        return build_edu_tree(model, task, config, seed)
    if config.kind == "sample_edu":
        return build_sample_edu_tree(model, task, config, seed)
    if config.kind == "ht_bon":
        return build_ht_candidates(model, task, config, seed)
    if scorer is None:
        raise ValueError(f"strategy {config.kind} requires a scorer")
    if config.kind == "p_edu":
        return build_pruned_tree(model, task, config, scorer, seed)
    return build_mcts_tree(model, task, config, scorer, seed)


# ---------------------------------------------------------------------------
# Traversal helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathEvent:
    """A branch event as seen from one leaf path."""
    position: int  # 1-based token index of the branch token in the path
    token_id: int
    entropy: float


def leaf_paths(tree: DecodeTree) -> Iterator[Tuple[BranchNode, List[int], List[PathEvent]]]:
    """Yield (leaf, full generated token path, branch events on the path)
    in deterministic child-order traversal."""

    def walk(node: BranchNode, prefix: List[int], events: List[PathEvent]):
        path = prefix + node.span
        if not node.children:
            yield node, path, events
            return
        offset = len(path)
        for child in node.children:
            child_events = events
            if child.branch_token_id is not None:
                child_events = events + [PathEvent(
                    position=offset + 1,
                    token_id=child.branch_token_id,
                    entropy=float(child.entropy_at_branch),
                )]
            yield from walk(child, path, child_events)

    yield from walk(tree.root, [], [])


def surviving_leaves(tree: DecodeTree) -> List[Tuple[BranchNode, List[int], List[PathEvent]]]:
    """Leaf paths that were not cut short by pruning / lookahead stubs."""
    out = [(leaf, path, ev) for leaf, path, ev in leaf_paths(tree) if not leaf.pruned]
    return out


# ---------------------------------------------------------------------------
# Serialization: one preamble line per file, then per tree a header line
# followed by one line per node.
# ---------------------------------------------------------------------------

def save_trees(path: str, trees: Sequence[DecodeTree], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({
            "schema": TREES_SCHEMA, "vocab": list(vocab.tokens), "eos_id": vocab.eos_id,
        }, sort_keys=True) + "\n")
        for tree in trees:
            f.write(json.dumps({"tree": {
                "task_id": tree.task_id,
                "seed": tree.seed,
                "leaf_count": tree.leaf_count,
                "total_tokens": tree.total_tokens,
                "rollout_tokens": tree.rollout_tokens,
                "strategy": tree.strategy.to_dict(),
            }}, sort_keys=True) + "\n")
            order: List[Tuple[BranchNode, Optional[int]]] = []
            stack: List[Tuple[BranchNode, Optional[int]]] = [(tree.root, None)]
            while stack:
                node, parent = stack.pop()
                node_id = len(order)
                order.append((node, parent))
                for child in reversed(node.children):
                    stack.append((child, node_id))
            for node_id, (node, parent) in enumerate(order):
                f.write(json.dumps({"node": {
                    "id": node_id,
                    "parent": parent,
                    "branch_token": node.branch_token_id,
                    "entropy": node.entropy_at_branch,
                    "span": list(node.span),
                    "terminal": node.terminal,
                    "pruned": node.pruned,
                    "correct": None if node.verdict is None else node.verdict.correct,
                    "answer": None if node.verdict is None else node.verdict.extracted_answer,
                }}, sort_keys=True) + "\n")


def load_trees(path: str) -> Tuple[List[DecodeTree], Vocabulary]:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("schema") != TREES_SCHEMA:
            raise ValueError(f"unexpected tree file schema: {header.get('schema')!r}")
        vocab = Vocabulary(tuple(header["vocab"]), header["eos_id"])
        trees: List[DecodeTree] = []
        nodes: List[BranchNode] = []
        meta: Optional[dict] = None

        def flush():
            nonlocal meta, nodes
            if meta is None:
                return
            trees.append(DecodeTree(
                task_id=meta["task_id"], root=nodes[0], leaf_count=meta["leaf_count"],
                total_tokens=meta["total_tokens"],
                strategy=StrategyConfig.from_dict(meta["strategy"]),
                seed=meta["seed"], rollout_tokens=meta.get("rollout_tokens", 0),
            ))
            meta, nodes = None, []

        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "tree" in rec:
                flush()
                meta = rec["tree"]
            else:
                nd = rec["node"]
                node = BranchNode(
                    span=list(nd["span"]),
                    branch_token_id=nd["branch_token"],
                    entropy_at_branch=nd["entropy"],
                    terminal=nd["terminal"],
                    pruned=nd.get("pruned", False),
                    verdict=None if nd["correct"] is None and nd["answer"] is None
                    else Verdict(bool(nd["correct"]), nd["answer"]),
                )
                if nd["parent"] is not None:
                    nodes[nd["parent"]].children.append(node)
                nodes.append(node)
        flush()
    return trees, vocab
