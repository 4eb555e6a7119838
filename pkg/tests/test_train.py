import math

import numpy as np
import pytest

from protoscope import augment, features, prototree, train
from protoscope.features import FeatureMap
from protoscope.train import (
    AdamState,
    ConfusionMatrix,
    Sample,
    TrainConfig,
    adam_step,
    confusion_from_predictions,
    evaluate,
    kfold_split,
    metrics_summary,
    onecycle_lr,
    split_train_test,
)

from helpers import PATCH_TASK_MEAN, PATCH_TASK_STD, patch_dataset


class TestAdam:
    def test_zero_gradient_fresh_state_unchanged(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamState(params)
        adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
        assert np.array_equal(params["w"], [1.0, -2.0, 3.0])

    def test_first_step_is_minus_lr(self):
        params = {"w": np.array([0.0])}
        state = AdamState(params)
        adam_step(params, {"w": np.array([1.0])}, state, lr=0.001)
        # bias correction makes the first step ~ -lr * sign(g)
        assert params["w"][0] == pytest.approx(-0.001, abs=1e-9)

    def test_deterministic_trajectories(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal(4) for _ in range(20)]

        def run():
            params = {"w": np.zeros(4)}
            state = AdamState(params)
            for g in grads:
                adam_step(params, {"w": g}, state, lr=0.01)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        with pytest.raises(ValueError, match="shape mismatch"):
            adam_step(params, {"w": np.zeros(4)}, AdamState(params), lr=0.1)


class TestOneCycle:
    def test_step_zero(self):
        assert onecycle_lr(0, 100) == pytest.approx(0.001 / 25)

    def test_peak_at_pct_start(self):
        assert onecycle_lr(30, 100) == pytest.approx(0.001)

    def test_final_step(self):
        assert onecycle_lr(99, 100) == pytest.approx(4e-5 / 1e4, abs=1e-12)

    def test_monotone_warmup_then_anneal(self):
        lrs = [onecycle_lr(s, 200) for s in range(200)]
        peak = int(np.argmax(lrs))
        assert peak == 60  # 0.3 * 200
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:], lrs[peak + 1 :]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            onecycle_lr(100, 100)
        with pytest.raises(ValueError):
            onecycle_lr(-1, 100)


class TestSplitTrainTest:
    def test_paper_session1_counts(self):
        # 143 female / 203 male -> test 29 + 41, train 114 + 162
        labels = [0] * 143 + [1] * 203
        sessions = [1] * 346
        plan = split_train_test(labels, sessions, 0.2, seed=5)
        test = plan.test_indices()
        train_idx = plan.train_indices()
        test_f = sum(1 for i in test if labels[i] == 0)
        test_m = sum(1 for i in test if labels[i] == 1)
        assert (test_f, test_m) == (29, 41)
        assert (len(train_idx), len(test)) == (346 - 70, 70)

    @pytest.mark.parametrize(
        "n_f,n_m,expect_f,expect_m",
        [(143, 203, 29, 41), (292, 333, 58, 67), (300, 332, 60, 66)],
    )
    def test_all_paper_sessions(self, n_f, n_m, expect_f, expect_m):
        labels = [0] * n_f + [1] * n_m
        plan = split_train_test(labels, [1] * (n_f + n_m), 0.2, seed=0)
        test = plan.test_indices()
        assert sum(1 for i in test if labels[i] == 0) == expect_f
        assert sum(1 for i in test if labels[i] == 1) == expect_m

    def test_exact_ratio(self):
        labels = [0] * 10 + [1] * 10
        plan = split_train_test(labels, [1] * 20, 0.2, seed=1)
        test = plan.test_indices()
        assert sum(1 for i in test if labels[i] == 0) == 2
        assert sum(1 for i in test if labels[i] == 1) == 2

    def test_same_seed_same_plan(self):
        labels = [0, 1] * 25
        sessions = [1, 2] * 25
        a = split_train_test(labels, sessions, seed=7)
        b = split_train_test(labels, sessions, seed=7)
        assert a.assignment == b.assignment

    def test_different_seed_differs(self):
        labels = [0, 1] * 50
        a = split_train_test(labels, [1] * 100, seed=1)
        b = split_train_test(labels, [1] * 100, seed=2)
        assert a.assignment != b.assignment

    def test_partition(self):
        labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
        plan = split_train_test(labels, [1, 1, 1, 1, 1, 2, 2, 2, 2, 2], seed=3)
        assert set(plan.train_indices()) | set(plan.test_indices()) == set(range(10))
        assert not set(plan.train_indices()) & set(plan.test_indices())

    def test_stratified_per_session(self):
        labels = [0] * 10 + [1] * 10 + [0] * 10 + [1] * 10
        sessions = [1] * 20 + [2] * 20
        plan = split_train_test(labels, sessions, seed=4)
        for ses in (1, 2):
            for cls in (0, 1):
                test_n = sum(
                    1
                    for i in plan.test_indices()
                    if labels[i] == cls and sessions[i] == ses
                )
                assert test_n == 2

    def test_tiny_class_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            split_train_test([0, 1, 1], [1, 1, 1], seed=0)


class TestKfold:
    def test_uneven_round_robin(self):
        labels = [0] * 6 + [1] * 4
        with pytest.warns(UserWarning):
            plan = kfold_split(labels, k=5, seed=0)
        f_sizes = sorted(
            sum(1 for i in plan.fold_indices(f) if labels[i] == 0) for f in range(5)
        )
        m_sizes = sorted(
            sum(1 for i in plan.fold_indices(f) if labels[i] == 1) for f in range(5)
        )
        assert f_sizes == [1, 1, 1, 1, 2]
        assert m_sizes == [0, 1, 1, 1, 1]

    def test_even_folds(self):
        labels = [0] * 10 + [1] * 10
        plan = kfold_split(labels, k=5, seed=1)
        for f in range(5):
            fold = plan.fold_indices(f)
            assert sum(1 for i in fold if labels[i] == 0) == 2
            assert sum(1 for i in fold if labels[i] == 1) == 2

    def test_union_disjoint(self):
        labels = [0, 1] * 20
        plan = kfold_split(labels, k=5, seed=2)
        seen = []
        for f in range(5):
            seen.extend(plan.fold_indices(f))
        assert sorted(seen) == list(range(40))

    def test_fold_sizes_differ_by_at_most_one(self):
        labels = [0] * 13 + [1] * 17
        plan = kfold_split(labels, k=5, seed=3)
        for cls in (0, 1):
            sizes = [
                sum(1 for i in plan.fold_indices(f) if labels[i] == cls)
                for f in range(5)
            ]
            assert max(sizes) - min(sizes) <= 1

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            kfold_split([0, 1], k=1)


class TestMetrics:
    def test_worked_example(self):
        cm = ConfusionMatrix(tp=3, fp=1, fn=2, tn=4)
        assert cm.accuracy() == pytest.approx(0.7)
        assert cm.precision() == pytest.approx(0.75)
        assert cm.recall() == pytest.approx(0.6)
        assert cm.f1() == pytest.approx(2 / 3, abs=1e-4)

    def test_perfect_predictions(self):
        cm = confusion_from_predictions([0, 0, 1, 1], [0, 0, 1, 1])
        summary = metrics_summary(cm)
        assert summary["accuracy"] == 1.0
        assert summary["macro"]["f1"] == 1.0

    def test_all_one_class_on_balanced(self):
        cm = confusion_from_predictions([0, 1] * 10, [0] * 20)
        assert cm.accuracy() == 0.5
        assert cm.recall() == 1.0
        assert cm.swapped().recall() == 0.0
        assert cm.degenerate() or cm.swapped().degenerate()

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 50))
            y_true = rng.integers(0, 2, size=n)
            y_pred = rng.integers(0, 2, size=n)
            cm = confusion_from_predictions(y_true, y_pred)
            tp = int(np.sum((y_pred == 0) & (y_true == 0)))
            fp = int(np.sum((y_pred == 0) & (y_true == 1)))
            fn = int(np.sum((y_pred == 1) & (y_true == 0)))
            tn = int(np.sum((y_pred == 1) & (y_true == 1)))
            assert (cm.tp, cm.fp, cm.fn, cm.tn) == (tp, fp, fn, tn)
            assert cm.total == n
            if tp + fp and tp + fn:
                assert cm.precision() == tp / (tp + fp)
                assert cm.recall() == tp / (tp + fn)

    def test_f1_identities(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            cm = ConfusionMatrix(*(int(v) for v in rng.integers(0, 20, size=4)))
            if cm.total == 0:
                continue
            p, r = cm.precision(), cm.recall()
            if p + r > 0 and (2 * cm.tp + cm.fp + cm.fn) > 0:
                assert cm.f1() == pytest.approx(2 * p * r / (p + r))
                assert cm.f1() == pytest.approx(2 * cm.tp / (2 * cm.tp + cm.fp + cm.fn))


def fmap_samples(rng, n, dim=4):
    """Min-distance-separable fixed-feature-map samples.

    Class 0 patches sit near the origin (next to the small-norm prototype
    init), class 1 patches far away, so nearest-patch similarity carries
    the class signal from the first epoch.
    """
    samples = []
    for i in range(n):
        label = i % 2
        center = 2.0 if label else 0.1
        values = rng.normal(center, 0.2, size=(2, 2, dim)).astype(np.float32)
        samples.append(Sample(label=label, fmap=FeatureMap(values)))
    return samples


def histories_equal(h1, h2):
    """EpochStats equality that treats NaN test accuracy as equal."""
    if len(h1) != len(h2):
        return False
    for a, b in zip(h1, h2):
        same_test = (a.test_acc == b.test_acc) or (
            math.isnan(a.test_acc) and math.isnan(b.test_acc)
        )
        if not (a.epoch == b.epoch and a.train_loss == b.train_loss
                and a.train_acc == b.train_acc and same_test):
            return False
    return True


class TestTrainModel:
    def test_zero_lr_keeps_params(self):
        from protoscope.rng import mix

        rng = np.random.default_rng(0)
        samples = fmap_samples(rng, 8)
        config = TrainConfig(learning_rate=0.0, epochs=1, batch_size=4, seed=1, tree_depth=1)
        tree, _ = train.train_model(samples, config, augment.preset_from_id(0))
        fresh = prototree.init_tree(1, 4, seed=mix(1, train._TREE_INIT_TAG))
        assert np.array_equal(tree.prototypes, fresh.prototypes)
        assert np.all(tree.leaf_logits == 0.0)

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(1)
        samples = fmap_samples(rng, 12)
        config = TrainConfig(epochs=3, batch_size=4, seed=9, tree_depth=2)
        t1, h1 = train.train_model(samples, config, augment.preset_from_id(0))
        t2, h2 = train.train_model(samples, config, augment.preset_from_id(0))
        assert np.array_equal(t1.prototypes, t2.prototypes)
        assert np.array_equal(t1.leaf_logits, t2.leaf_logits)
        assert histories_equal(h1, h2)

    def test_learns_separable_fmap_task(self):
        rng = np.random.default_rng(2)
        samples = fmap_samples(rng, 40)
        test = fmap_samples(rng, 20)
        config = TrainConfig(epochs=30, batch_size=8, seed=3, tree_depth=1)
        tree, history = train.train_model(samples, config, augment.preset_from_id(0), test_samples=test)
        assert history[-1].test_acc >= 0.95
        assert all(math.isfinite(h.train_loss) for h in history)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train.train_model([], TrainConfig(), augment.preset_from_id(0))

    def test_feature_dim_mismatch(self):
        rng = np.random.default_rng(3)
        bad = fmap_samples(rng, 4) + [
            Sample(label=0, fmap=FeatureMap(np.zeros((1, 1, 3), dtype=np.float32)))
        ]
        with pytest.raises(ValueError, match="mismatch"):
            train.train_model(bad, TrainConfig(epochs=1), augment.preset_from_id(0))

    def test_image_mode_with_augmentation(self):
        samples = patch_dataset(50, 12, size=32)
        preset = augment.preset_from_id(5, target=32, mean=PATCH_TASK_MEAN, std=PATCH_TASK_STD)
        backbone = features.init_frozen(seed=11)
        config = TrainConfig(epochs=2, batch_size=4, seed=5, tree_depth=1)
        t1, h1 = train.train_model(samples, config, preset, backbone=backbone)
        t2, h2 = train.train_model(samples, config, preset, backbone=backbone)
        assert np.array_equal(t1.prototypes, t2.prototypes)
        assert histories_equal(h1, h2)

    def test_history_csv(self, tmp_path):
        rng = np.random.default_rng(4)
        samples = fmap_samples(rng, 8)
        config = TrainConfig(epochs=2, batch_size=4, seed=1, tree_depth=1)
        _, history = train.train_model(samples, config, augment.preset_from_id(0))
        path = tmp_path / "history.csv"
        train.write_history_csv(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,test_acc"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == pytest.approx(history[0].train_loss)


class TestEvaluate:
    def test_matches_manual_confusion(self):
        rng = np.random.default_rng(5)
        samples = fmap_samples(rng, 30)
        config = TrainConfig(epochs=10, batch_size=8, seed=2, tree_depth=1)
        tree, _ = train.train_model(samples, config, augment.preset_from_id(0))
        maps = [s.fmap for s in samples]
        labels = [s.label for s in samples]
        cm, metrics = evaluate(tree, maps, labels)
        preds = [
            int(np.argmax(prototree.predict(tree, fm).class_distribution)) for fm in maps
        ]
        manual = confusion_from_predictions(labels, preds)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (manual.tp, manual.tn, manual.fp, manual.fn)
        assert metrics["accuracy"] == cm.accuracy()

    def test_empty_dataset(self):
        tree = prototree.init_tree(1, 2)
        with pytest.raises(ValueError, match="empty"):
            evaluate(tree, [], [])
