import math

import numpy as np
import pytest

from conftest import delayed_reward_scenario, peaked_row, positional_table
from eduprm.entropy_anchor import AnchorPolicy
from eduprm.lm_core import TableModel
from eduprm.mc_labeler import Fragment, LabeledExample, label_trees
from eduprm.prm import (
    FeatureConfig, PrmModel, RemoteScorer, ScoreServer, TrainConfig,
    TrainingDivergedError, auc, extract_features, linear_loss_and_grad,
    lr_schedule, make_oracle_scorer, make_prm_scorer, mlp_loss_and_grad,
    score_prefix, scripted_scorer, select_best_epoch, train,
)
from eduprm.task_env import Task, build_vocabulary, generate_tasks, reference_trace
from eduprm.tree_sampler import StrategyConfig, build_edu_tree


@pytest.fixture(scope="module")
def v():
    return build_vocabulary()


def fake_example(task_id, prefix, label):
    return LabeledExample(
        fragment=Fragment(task_id=task_id, path_prefix=tuple(prefix),
                          fragment_span=tuple(prefix[-1:]), segment_index=0),
        label=label, label_kind="hard" if label in (0.0, 1.0) else "soft")


class TestLossAndGradient:
    def test_gradient_matches_central_differences_linear(self):
        rng = np.random.default_rng(0)
        n, d = 30, 7
        x = rng.normal(0, 1, size=(n, d))
        labels = rng.uniform(0, 1, size=n)
        y = np.stack([1 - labels, labels], axis=1)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            w = rng.normal(0, 1, size=(2, d))
            _, grad = linear_loss_and_grad(w, x, y)
            fd = np.zeros_like(w)
            for i in range(2):
                for j in range(d):
                    wp, wm = w.copy(), w.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    fd[i, j] = (linear_loss_and_grad(wp, x, y)[0]
                                - linear_loss_and_grad(wm, x, y)[0]) / (2 * h)
            rel = np.abs(grad - fd) / (np.abs(fd) + 1e-8)
            worst = max(worst, rel.max())
        assert worst < 1e-5

    def test_gradient_matches_central_differences_mlp(self):
        rng = np.random.default_rng(1)
        n, d, hdim = 20, 5, 6
        x = rng.normal(0, 1, size=(n, d))
        labels = rng.uniform(0, 1, size=n)
        y = np.stack([1 - labels, labels], axis=1)
        h = 1e-6
        for _ in range(20):
            w1 = rng.normal(0, 1, size=(hdim, d))
            w2 = rng.normal(0, 1, size=(2, hdim))
            _, g1, g2 = mlp_loss_and_grad(w1, w2, x, y)
            for w, g in ((w1, g1), (w2, g2)):
                for _check in range(5):
                    i = rng.integers(0, w.shape[0])
                    j = rng.integers(0, w.shape[1])
                    wp, wm = w.copy(), w.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    if w is w1:
                        fp = mlp_loss_and_grad(wp, w2, x, y)[0]
                        fm = mlp_loss_and_grad(wm, w2, x, y)[0]
                    else:
                        fp = mlp_loss_and_grad(w1, wp, x, y)[0]
                        fm = mlp_loss_and_grad(w1, wm, x, y)[0]
                    fd = (fp - fm) / (2 * h)
                    assert abs(g[i, j] - fd) / (abs(fd) + 1e-8) < 1e-5

    def test_loss_floor_is_ln2_for_uncertain_labels(self):
        x = np.ones((4, 3))
        y = np.full((4, 2), 0.5)
        loss, grad = linear_loss_and_grad(np.zeros((2, 3)), x, y)
        assert abs(loss - math.log(2)) < 1e-12
        assert np.allclose(grad, 0.0)


class TestTraining:
    def test_separable_two_examples_monotone_to_small_loss(self, v):
        tasks = generate_tasks("chain-arithmetic", 2, 1, 0, v)
        good = reference_trace(tasks[0], v)
        bad = v.encode(["then", "9", "9", "<eos>"])
        examples = [fake_example(tasks[0].id, good, 1.0),
                    fake_example(tasks[1].id, bad, 0.0)]
        config = TrainConfig(epochs=30, learning_rate=2.0, batch_size=8,
                             val_fraction=0.0)
        model = train(examples, tasks, v, config, seed=0)
        losses = model.training_meta["train_losses"]
        assert all(losses[i + 1] <= losses[i] + 1e-12 for i in range(len(losses) - 1))
        assert losses[-1] < 0.1

    def test_uniform_labels_converge_to_ln2(self, v):
        tasks = generate_tasks("chain-arithmetic", 4, 1, 0, v)
        examples = [fake_example(t.id, reference_trace(t, v), 0.5) for t in tasks]
        model = train(examples, tasks, v, TrainConfig(epochs=5, val_fraction=0.0), seed=0)
        assert abs(model.training_meta["train_losses"][-1] - math.log(2)) < 1e-3

    def test_empty_dataset_raises(self, v):
        with pytest.raises(ValueError):
            train([], [], v)

    def test_divergence_raises(self, v, monkeypatch):
        import eduprm.prm as prm_module
        tasks = generate_tasks("chain-arithmetic", 2, 1, 0, v)
        examples = [fake_example(tasks[0].id, reference_trace(tasks[0], v), 1.0),
                    fake_example(tasks[1].id, reference_trace(tasks[1], v), 0.0)]

        def nan_loss(w, x, y):
            return float("nan"), np.zeros_like(w)

        monkeypatch.setattr(prm_module, "linear_loss_and_grad", nan_loss)
        with pytest.raises(TrainingDivergedError):
            train(examples, tasks, v, TrainConfig(epochs=2, val_fraction=0.0), seed=0)

    def test_deterministic_given_seed(self, v):
        tasks = generate_tasks("chain-arithmetic", 10, 2, 3, v)
        examples = [fake_example(t.id, reference_trace(t, v), float(i % 2))
                    for i, t in enumerate(tasks)]
        m1 = train(examples, tasks, v, TrainConfig(epochs=3), seed=11)
        m2 = train(examples, tasks, v, TrainConfig(epochs=3), seed=11)
        assert np.array_equal(m1.weights, m2.weights)

    def test_mlp_variant_trains(self, v):
        tasks = generate_tasks("chain-arithmetic", 10, 2, 3, v)
        examples = [fake_example(t.id, reference_trace(t, v), float(i % 2))
                    for i, t in enumerate(tasks)]
        model = train(examples, tasks, v,
                      TrainConfig(epochs=3, hidden=16, val_fraction=0.0), seed=1)
        assert model.kind == "mlp"
        assert model.hidden_weights.shape == (16, model.feature_config.dim)


def test_select_best_epoch_scripted():
    assert select_best_epoch([0.5, 0.3, 0.4, 0.3]) == 1  # earliest argmin
    assert select_best_epoch([0.2]) == 0


def test_lr_schedule_shape():
    total, initial = 1000, 1e-3
    warmup = max(1, int(np.ceil(0.01 * total)))
    assert lr_schedule(0, total, initial) == pytest.approx(initial / warmup)
    assert lr_schedule(warmup, total, initial) == pytest.approx(initial)
    assert lr_schedule(total, total, initial) == pytest.approx(initial * 1e-4)
    mid = lr_schedule((total + warmup) // 2, total, initial)
    assert initial * 1e-4 < mid < initial


class TestScoring:
    def test_zero_weight_model_scores_half(self, v):
        fc = FeatureConfig(vocab_size=v.size)
        model = PrmModel(vocab=v, feature_config=fc,
                         weights=np.zeros((2, fc.dim)))
        (task,) = generate_tasks("chain-arithmetic", 1, 1, 5, v)
        assert score_prefix(model, task, [0, 1]).p_correct == 0.5

    def test_trained_model_fits_training_point(self, v):
        tasks = generate_tasks("chain-arithmetic", 6, 1, 0, v)
        examples = []
        for i, t in enumerate(tasks):
            good = reference_trace(t, v)
            examples.append(fake_example(t.id, good, 1.0))
            examples.append(fake_example(t.id, v.encode(["then", "9", "<eos>"]), 0.0))
        model = train(examples, tasks, v,
                      TrainConfig(epochs=20, learning_rate=2.0, val_fraction=0.0), seed=0)
        good0 = reference_trace(tasks[0], v)
        assert score_prefix(model, tasks[0], good0).p_correct > 0.5

    def test_score_is_pure(self, v):
        fc = FeatureConfig(vocab_size=v.size)
        rng = np.random.default_rng(0)
        model = PrmModel(vocab=v, feature_config=fc,
                         weights=rng.normal(0, 1, size=(2, fc.dim)))
        (task,) = generate_tasks("chain-arithmetic", 1, 1, 5, v)
        prefix = list(reference_trace(task, v))
        before = list(prefix)
        s1 = score_prefix(model, task, prefix).p_correct
        s2 = score_prefix(model, task, prefix).p_correct
        assert s1 == s2
        assert prefix == before


def test_model_file_round_trip(tmp_path, v):
    tasks = generate_tasks("chain-arithmetic", 6, 2, 0, v)
    examples = [fake_example(t.id, reference_trace(t, v), float(i % 2))
                for i, t in enumerate(tasks)]
    for hidden in (0, 8):
        model = train(examples, tasks, v,
                      TrainConfig(epochs=2, hidden=hidden, val_fraction=0.0), seed=0)
        path = str(tmp_path / f"prm{hidden}.bin")
        model.save(path)
        loaded = PrmModel.load(path)
        assert loaded.kind == model.kind
        for t in tasks[:3]:
            prefix = reference_trace(t, v)
            assert score_prefix(loaded, t, prefix).p_correct == \
                score_prefix(model, t, prefix).p_correct
    with open(str(tmp_path / "prm0.bin"), "r+b") as f:
        f.write(b"BAD")
    with pytest.raises(ValueError):
        PrmModel.load(str(tmp_path / "prm0.bin"))


class TestOracleScorer:
    def test_answered_prefixes(self, v):
        (task,) = generate_tasks("chain-arithmetic", 1, 1, 5, v)
        model = TableModel(vocab=v, rules={}, default=peaked_row(v, v.eos_id))
        oracle = make_oracle_scorer(model, v)
        right = v.encode(["then", "="] + list(task.reference_answer) + ["<eos>"])
        wrong = v.encode(["then", "=", "9", "9", "<eos>"])
        assert oracle(task, right) == 1.0
        assert oracle(task, wrong) == 0.0

    def test_mid_path_matches_enumeration(self, v):
        sc = delayed_reward_scenario(v, 2, 3)
        oracle = make_oracle_scorer(sc.model, v, max_len=48)
        # greedy completion from the good first token reaches the right answer
        assert oracle(sc.task, [sc.good_first]) == 1.0
        assert oracle(sc.task, [sc.trap_first]) == 0.0

    def test_sampled_rollouts_fraction(self, v):
        sc = delayed_reward_scenario(v, 2, 3)
        oracle = make_oracle_scorer(sc.model, v, max_len=48, rollouts=4,
                                    temperature=0.5, seed=3)
        value = oracle(sc.task, [sc.good_first])
        assert 0.0 <= value <= 1.0
        assert oracle(sc.task, [sc.good_first]) == value  # deterministic


def test_scripted_scorer_lookup():
    s = scripted_scorer({(1, 2): 0.9}, default=0.1)
    assert s(None, [1, 2]) == 0.9
    assert s(None, [2, 1]) == 0.1


def test_auc_known_cases():
    assert auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
    assert auc([0.1, 0.2, 0.8, 0.9], [True, True, False, False]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [True, False, True, False]) == 0.5
    with pytest.raises(ValueError):
        auc([0.5], [True])


def test_trained_prm_separates_held_out(suite):
    """Smoke version of the utility criterion on a small slice."""
    cfg = StrategyConfig(kind="edu", policy=AnchorPolicy(threshold_nats=1.0,
                                                         max_branches=8))
    trees = [build_edu_tree(suite.model, t, cfg, seed=i)
             for i, t in enumerate(suite.train_tasks[:60])]
    examples = label_trees(trees)
    model = train(examples, suite.train_tasks[:60], suite.vocab,
                  TrainConfig(epochs=5, learning_rate=1.0), seed=0)
    scorer = make_prm_scorer(model)
    scores, labels = [], []
    for i, t in enumerate(suite.tasks[:40]):
        tree = build_edu_tree(suite.model, t, cfg, seed=1000 + i)
        from eduprm.tree_sampler import leaf_paths
        for leaf, path, _ in leaf_paths(tree):
            scores.append(scorer(t, path))
            labels.append(leaf.verdict.correct)
    assert auc(scores, labels) > 0.85


class TestScoreProtocol:
    def test_round_trip(self, v):
        (task,) = generate_tasks("chain-arithmetic", 1, 1, 5, v)
        table = {tuple(v.encode(["then"])): 0.75}
        server = ScoreServer(scripted_scorer(table, 0.25), [task]).start()
        try:
            remote = RemoteScorer(*server.address)
            assert remote(task, v.encode(["then"])) == 0.75
            assert remote(task, v.encode(["so"])) == 0.25
            remote.close()
        finally:
            server.shutdown()

    def test_unknown_task(self, v):
        (task,) = generate_tasks("chain-arithmetic", 1, 1, 5, v)
        other = Task(id="missing", prompt=task.prompt,
                     reference_answer="1", family=task.family)
        server = ScoreServer(scripted_scorer({}, 0.5), [task]).start()
        try:
            remote = RemoteScorer(*server.address)
            from eduprm.lm_core import RemoteUnreachableError
            with pytest.raises(RemoteUnreachableError):
                remote(other, [])
            remote.close()
        finally:
            server.shutdown()
