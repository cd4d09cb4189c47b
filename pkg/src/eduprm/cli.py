"""Command-line pipeline: gen-tasks, sample, build-dataset, train-prm,
evaluate, sweep, analyze.

Every run writes the fully resolved configuration to
``<out>/run_config.json``; re-running any command with
``--config <that file>`` reproduces the outputs byte for byte,
independent of ``--workers``. Flag defaults can be overridden through
``EDUPRM_<FLAG>`` environment variables (e.g. ``EDUPRM_SEED=7``);
explicit flags win over the config file, which wins over the
environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analysis, bon_eval, mc_labeler, prm, task_env, tree_sampler
from .entropy_anchor import AnchorPolicy, DEFAULT_WHITELIST, load_whitelist
from .lm_core import NgramModel, RemoteModel, Vocabulary, train_ngram
from .prm import PrmModel, RemoteScorer, TrainConfig, make_oracle_scorer, make_prm_scorer
from .task_env import FAMILIES, generate_tasks, load_tasks, save_tasks
from .tree_sampler import StrategyConfig, build_tree, load_trees, save_trees

ENV_PREFIX = "EDUPRM_"


class ConfigError(Exception):
    """Invalid configuration; the message names the offending flag."""


def _env_default(flag: str, fallback):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), fallback)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=_env_default("seed", 1234))
    p.add_argument("--out", type=str, default=_env_default("out", "out"))
    p.add_argument("--workers", type=int, default=_env_default("workers", 1))
    p.add_argument("--config", type=str, default=None,
                   help="load flag values from a previously emitted run_config.json")


def _add_strategy_flags(p: argparse.ArgumentParser):
    p.add_argument("--entropy-threshold", type=float,
                   default=_env_default("entropy_threshold", 1.0))
    p.add_argument("--max-branches", type=int, default=_env_default("max_branches", 8))
    p.add_argument("--temperature", type=float, default=_env_default("temperature", 0.7))
    p.add_argument("--prune-threshold", type=float,
                   default=_env_default("prune_threshold", 0.2))
    p.add_argument("--mcts-depth", type=int, default=_env_default("mcts_depth", 3))
    p.add_argument("--epsilon", type=float, default=_env_default("epsilon", 1e-10))
    p.add_argument("--max-len", type=int, default=_env_default("max_len", 256))
    p.add_argument("--whitelist", type=str, default=None,
                   help="token whitelist file, one surface per line")
    p.add_argument("--model", type=str, default=_env_default("model", "ngram:"))
    p.add_argument("--scorer", type=str, default=_env_default("scorer", "oracle"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eduprm")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-tasks", help="generate a verifiable task set")
    p.add_argument("--family", type=str, default=_env_default("family", "chain-arithmetic"))
    p.add_argument("--count", type=int, default=_env_default("count", 100))
    p.add_argument("--difficulty", type=int, default=_env_default("difficulty", 3))
    _add_common(p)

    p = sub.add_parser("sample", help="build decode trees for a task set")
    p.add_argument("--tasks", type=str, required=False)
    p.add_argument("--strategy", action="append", default=None,
                   choices=list(tree_sampler.STRATEGY_KINDS))
    p.add_argument("--save-model", type=str, default=None,
                   help="also persist the resolved model")
    _add_strategy_flags(p)
    _add_common(p)

    p = sub.add_parser("build-dataset", help="label trees and emit training records")
    p.add_argument("--trees", type=str, required=False)
    _add_common(p)

    p = sub.add_parser("train-prm", help="train the reward model on a dataset")
    p.add_argument("--dataset", type=str, required=False)
    p.add_argument("--tasks", type=str, required=False)
    p.add_argument("--epochs", type=int, default=_env_default("epochs", 5))
    p.add_argument("--learning-rate", type=float, default=_env_default("learning_rate", 1e-3))
    p.add_argument("--batch-size", type=int, default=_env_default("batch_size", 64))
    p.add_argument("--hidden", type=int, default=_env_default("hidden", 0))
    p.add_argument("--val-fraction", type=float, default=_env_default("val_fraction", 0.1))
    _add_common(p)

    p = sub.add_parser("evaluate", help="compare strategies on accuracy vs tokens")
    p.add_argument("--tasks", type=str, required=False)
    p.add_argument("--strategy", action="append", default=None,
                   choices=list(tree_sampler.STRATEGY_KINDS))
    p.add_argument("--repeats", type=int, default=_env_default("repeats", 1))
    _add_strategy_flags(p)
    _add_common(p)

    p = sub.add_parser("sweep", help="threshold sweep table")
    p.add_argument("--tasks", type=str, required=False)
    p.add_argument("--thresholds", type=str,
                   default=_env_default("thresholds", "0.8,1.2,1.6,2.0,2.4"))
    _add_strategy_flags(p)
    _add_common(p)

    p = sub.add_parser("analyze", help="branch depth and word statistics from trees")
    p.add_argument("--trees", type=str, required=False)
    p.add_argument("--bins", type=int, default=_env_default("bins", 20))
    p.add_argument("--entropy-threshold", type=float,
                   default=_env_default("entropy_threshold", 1.0))
    _add_common(p)

    return parser


def _apply_config_file(argv: List[str], args: argparse.Namespace,
                       parser: argparse.ArgumentParser) -> argparse.Namespace:
    if not args.config:
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            stored = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"--config: cannot read {args.config}: {e}") from e
    if stored.get("subcommand") != args.subcommand:
        raise ConfigError(f"--config: file is for subcommand "
                          f"{stored.get('subcommand')!r}, not {args.subcommand!r}")
    merged = dict(stored)
    merged.pop("subcommand", None)
    reparsed = parser.parse_args(argv)
    for key, value in merged.items():
        if hasattr(reparsed, key):
            setattr(reparsed, key, value)
    # explicit command-line flags win over the config file
    explicit = _explicit_dests(argv, parser)
    for key in explicit:
        setattr(reparsed, key, getattr(args, key))
    return reparsed


def _explicit_dests(argv: List[str], parser: argparse.ArgumentParser) -> List[str]:
    dests = []
    text = argv[1:]
    for action_parser in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
        for action in action_parser._actions:
            for opt in action.option_strings:
                if any(a == opt or a.startswith(opt + "=") for a in text):
                    dests.append(action.dest)
    return dests


def _run_config_dict(args: argparse.Namespace) -> Dict:
    d = {k: v for k, v in vars(args).items() if k != "config"}
    return d


def _write_run_config(args: argparse.Namespace) -> None:
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w", encoding="utf-8") as f:
        json.dump(_run_config_dict(args), f, sort_keys=True, indent=2)
        f.write("\n")


def _require(args, flag: str):
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value in (None, []):
        raise ConfigError(f"{flag} is required for this subcommand")
    return value


def _policy(args, whitelist) -> AnchorPolicy:
    if args.entropy_threshold <= 0:
        raise ConfigError("--entropy-threshold must be positive")
    if args.max_branches < 1:
        raise ConfigError("--max-branches must be >= 1")
    return AnchorPolicy(
        threshold_nats=args.entropy_threshold,
        epsilon=args.epsilon,
        whitelist=whitelist,
        max_branches=args.max_branches,
    )


def _strategy_config(kind: str, args, whitelist) -> StrategyConfig:
    return StrategyConfig(
        kind=kind,
        policy=_policy(args, whitelist),
        temperature=args.temperature,
        prune_threshold=args.prune_threshold,
        rollout_depth=args.mcts_depth,
        n_samples=args.max_branches,
        max_len=args.max_len,
    )


def _load_whitelist(args):
    if getattr(args, "whitelist", None):
        return load_whitelist(args.whitelist)
    return DEFAULT_WHITELIST


def _corpus_seed(seed: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(0xC0,))
    return np.random.default_rng(ss)


def build_model_from_spec(spec: str, tasks, vocab: Vocabulary, seed: int):
    """Resolve a --model spec.

    ngram:[order=6][,smoothing=0.1][,corpus=2000][,difficulty=3]
        trains on reference traces of a fresh task mix drawn per family
        of the provided task set, with a corpus seed derived from --seed;
    file:PATH loads a persisted ngram model;
    remote:HOST:PORT connects to a token server.
    """
    if spec.startswith("remote:"):
        try:
            host, port = spec[len("remote:"):].rsplit(":", 1)
            return RemoteModel(vocab, host, int(port))
        except ValueError as e:
            raise ConfigError(f"--model: bad remote spec {spec!r}") from e
    if spec.startswith("file:"):
        return NgramModel.load(spec[len("file:"):])
    if not spec.startswith("ngram"):
        raise ConfigError(f"--model: unknown spec {spec!r}")
    params = {"order": 6, "smoothing": 0.1, "corpus": 2000, "difficulty": 3}
    body = spec[len("ngram"):].lstrip(":")
    if body:
        for part in body.split(","):
            if not part:
                continue
            try:
                key, value = part.split("=")
                params[key] = float(value) if key == "smoothing" else int(value)
            except (ValueError, KeyError) as e:
                raise ConfigError(f"--model: bad ngram parameter {part!r}") from e
    families = sorted({t.family for t in tasks}) or ["chain-arithmetic"]
    rng = _corpus_seed(seed)
    corpus = []
    per_family = max(1, int(params["corpus"]) // len(families))
    difficulties = list(range(1, int(params["difficulty"]) + 1))
    for fam in families:
        per_diff = max(1, per_family // len(difficulties))
        for diff in difficulties:
            sub_seed = int(rng.integers(0, 2 ** 63))
            for task in generate_tasks(fam, per_diff, diff, sub_seed, vocab):
                trace = task_env.reference_trace(task, vocab, rng)
                corpus.append(list(task.prompt) + trace)
    return train_ngram(corpus, int(params["order"]), float(params["smoothing"]), vocab)


def build_scorer_from_spec(spec: str, model, vocab: Vocabulary, max_len: int):
    if spec == "oracle":
        return make_oracle_scorer(model, vocab, max_len=max_len)
    if spec.startswith("prm:"):
        return make_prm_scorer(PrmModel.load(spec[len("prm:"):]))
    if spec.startswith("remote:"):
        try:
            host, port = spec[len("remote:"):].rsplit(":", 1)
            return RemoteScorer(host, int(port))
        except ValueError as e:
            raise ConfigError(f"--scorer: bad remote spec {spec!r}") from e
    raise ConfigError(f"--scorer: unknown spec {spec!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_tasks(args) -> int:
    if args.family not in FAMILIES:
        raise ConfigError(f"--family must be one of {', '.join(FAMILIES)}")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if args.difficulty < 1:
        raise ConfigError("--difficulty must be >= 1")
    vocab = task_env.build_vocabulary()
    tasks = generate_tasks(args.family, args.count, args.difficulty, args.seed, vocab)
    _write_run_config(args)
    path = os.path.join(args.out, "tasks.jsonl")
    save_tasks(path, tasks, vocab)
    print(f"gen-tasks: {len(tasks)} tasks family={args.family} "
          f"difficulty={args.difficulty} -> {path}")
    return 0


def cmd_sample(args) -> int:
    tasks_path = _require(args, "--tasks")
    tasks, vocab = load_tasks(tasks_path)
    whitelist = _load_whitelist(args)
    kinds = args.strategy or ["edu"]
    if len(kinds) != 1:
        raise ConfigError("--strategy: sample takes exactly one strategy")
    config = _strategy_config(kinds[0], args, whitelist)
    model = build_model_from_spec(args.model, tasks, vocab, args.seed)
    scorer = None
    if config.kind in ("p_edu", "mcts_edu"):
        scorer = build_scorer_from_spec(args.scorer, model, vocab, args.max_len)
    _write_run_config(args)
    if args.save_model and isinstance(model, NgramModel):
        model.save(os.path.join(args.out, args.save_model))

    def one(i: int):
        task = tasks[i]
        try:
            return build_tree(model, task, config,
                              bon_eval.derive_task_seed(args.seed, 0, i), scorer=scorer)
        except Exception as e:
            raise RuntimeError(f"sample failed on task {task.id}: {e}") from e

    trees = _pool_map(one, range(len(tasks)), args.workers)
    path = os.path.join(args.out, "trees.jsonl")
    save_trees(path, trees, vocab)
    total = sum(t.total_tokens for t in trees)
    print(f"sample: {len(trees)} trees strategy={config.kind} "
          f"tokens={total} -> {path}")
    return 0


def cmd_build_dataset(args) -> int:
    trees_path = _require(args, "--trees")
    trees, vocab = load_trees(trees_path)
    examples = mc_labeler.label_trees(trees)
    _write_run_config(args)
    path = os.path.join(args.out, "dataset.tsv")
    count = mc_labeler.emit_dataset(examples, path, vocab)
    hard = mc_labeler.hard_fraction(examples)
    print(f"build-dataset: {count} examples hard={hard:.1%} soft={1 - hard:.1%} -> {path}")
    return 0


def cmd_train_prm(args) -> int:
    dataset_path = _require(args, "--dataset")
    tasks_path = _require(args, "--tasks")
    tasks, vocab = load_tasks(tasks_path)
    examples = mc_labeler.parse_dataset(dataset_path, vocab)
    if not examples:
        raise ConfigError("--dataset: file contains no examples")
    config = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        hidden=args.hidden,
        val_fraction=args.val_fraction,
    )
    _write_run_config(args)
    model = prm.train(examples, tasks, vocab, config, seed=args.seed)
    path = os.path.join(args.out, "prm.bin")
    model.save(path)
    meta = model.training_meta
    print(f"train-prm: {len(examples)} examples best_epoch={meta['best_epoch']} "
          f"val_loss={meta['val_losses'][meta['best_epoch']]:.4f} -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    tasks_path = _require(args, "--tasks")
    if not args.strategy:
        raise ConfigError("--strategy: at least one strategy is required")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    tasks, vocab = load_tasks(tasks_path)
    whitelist = _load_whitelist(args)
    strategies = [_strategy_config(kind, args, whitelist) for kind in args.strategy]
    model = build_model_from_spec(args.model, tasks, vocab, args.seed)
    scorer = build_scorer_from_spec(args.scorer, model, vocab, args.max_len)
    _write_run_config(args)
    reports = bon_eval.run_experiment(tasks, model, strategies, scorer, args.seed,
                                      workers=args.workers, repeats=args.repeats)
    path = os.path.join(args.out, "reports.csv")
    bon_eval.write_reports_csv(path, reports)
    for r in reports:
        print(f"evaluate: {r.label} accuracy={r.accuracy:.3f} "
              f"avg_tokens={r.avg_tokens_per_task:.1f}")
    print(f"evaluate: {len(reports)} strategies over {len(tasks)} tasks -> {path}")
    return 0


def cmd_sweep(args) -> int:
    tasks_path = _require(args, "--tasks")
    try:
        thresholds = [float(x) for x in args.thresholds.split(",") if x]
    except ValueError as e:
        raise ConfigError(f"--thresholds: {e}") from e
    if not thresholds:
        raise ConfigError("--thresholds: list must be non-empty")
    tasks, vocab = load_tasks(tasks_path)
    whitelist = _load_whitelist(args)
    base = _strategy_config("edu", args, whitelist)
    model = build_model_from_spec(args.model, tasks, vocab, args.seed)
    scorer = build_scorer_from_spec(args.scorer, model, vocab, args.max_len)
    _write_run_config(args)
    rows = analysis.threshold_sweep(model, tasks, thresholds, base, scorer,
                                    args.seed, workers=args.workers)
    path = os.path.join(args.out, "sweep.csv")
    analysis.write_sweep_csv(path, rows)
    print(f"sweep: {len(rows)} thresholds over {len(tasks)} tasks -> {path}")
    return 0


def cmd_analyze(args) -> int:
    trees_path = _require(args, "--trees")
    if args.bins < 1:
        raise ConfigError("--bins must be >= 1")
    trees, vocab = load_trees(trees_path)
    _write_run_config(args)
    events = analysis.relative_depths(trees, vocab)
    counts = analysis.depth_histogram(events, args.bins) if events else \
        np.zeros(args.bins, dtype=np.int64)
    hist_path = os.path.join(args.out, "depth_hist.csv")
    analysis.write_depth_hist_csv(hist_path, args.entropy_threshold, counts)
    words_path = os.path.join(args.out, "branch_words.csv")
    analysis.write_branch_words_csv(words_path, analysis.branch_word_frequency(events))
    print(f"analyze: {len(events)} branch events from {len(trees)} trees "
          f"-> {hist_path}, {words_path}")
    return 0


def _pool_map(fn, items, workers: int):
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


_COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "sample": cmd_sample,
    "build-dataset": cmd_build_dataset,
    "train-prm": cmd_train_prm,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(argv, args, parser)
        return _COMMANDS[args.subcommand](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
