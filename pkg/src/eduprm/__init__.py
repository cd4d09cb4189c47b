"""Entropy-driven branching tree decoding and process reward modeling
over synthetic verifiable tasks: build decode trees that branch top-2 at
high-entropy anchors, label fragments by Monte-Carlo subtree outcomes,
train a small reward model on the labels, and compare sampling
strategies on accuracy-versus-token trade-offs."""

from .lm_core import (
    NgramModel, RemoteModel, RemoteUnreachableError, TableModel,
    UnknownTokenError, Vocabulary, next_logits, train_ngram,
)
from .task_env import (
    FAMILIES, Task, Verdict, build_vocabulary, generate_tasks,
    load_tasks, save_tasks, verify,
)
from .entropy_anchor import (
    AnchorDecision, AnchorPolicy, DEFAULT_WHITELIST, TokenDistribution,
    decide_anchor, load_whitelist, softmax_entropy,
)
from .tree_sampler import (
    BranchNode, DecodeTree, StrategyConfig, build_edu_tree,
    build_ht_candidates, build_mcts_tree, build_pruned_tree,
    build_sample_edu_tree, build_tree, leaf_paths, load_trees, save_trees,
)
from .mc_labeler import (
    Fragment, LabeledExample, UnverifiedLeafError, emit_dataset,
    label_tree, label_trees, parse_dataset,
)
from .prm import (
    FeatureConfig, PrmModel, PrmScore, TrainConfig, make_oracle_scorer,
    make_prm_scorer, score_prefix, scripted_scorer, train,
)
from .bon_eval import (
    CandidateSet, StrategyReport, candidate_set, run_experiment,
    select_bon, select_majority, write_reports_csv,
)
from .analysis import (
    BranchEvent, branch_word_frequency, depth_histogram, relative_depths,
    threshold_sweep,
)

__version__ = "0.1.0"
