"""Training loop, dataset splitting, and binary-classification metrics.

One tree is trained per developmental session with Adam (lr 0.001,
batch 16), a one-cycle learning-rate schedule, and 50 epochs by default.
Splits are stratified per (session, class); metrics report accuracy,
precision, recall, and F1 per class plus the macro average.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import features as feat
from . import prototree as pt
from . import rng as prng
from .features import FeatureMap
from .raster import RasterImage

# Stream tags keeping shuffle / init draws independent of the per-sample
# augmentation streams mix(seed, epoch, index).
_TREE_INIT_TAG = 0x74726565  # "tree"
_SHUFFLE_TAG = 0x73687566    # "shuf"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    folds: int = 5
    tree_depth: int = 3
    num_classes: int = 2

    def __post_init__(self):
        # lr 0 is legal: a no-op training run (useful as a determinism probe).
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("hyperparameters must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_epsilon > 0):
            raise ValueError("invalid Adam parameters")
        if self.tree_depth < 1 or self.num_classes < 2:
            raise ValueError("invalid tree shape")


@dataclass
class Sample:
    """One labeled training unit: either a ROI image (augmented and fed to
    the backbone each epoch) or a fixed, externally computed feature map."""

    label: int
    image: RasterImage | None = None
    fmap: FeatureMap | None = None

    def __post_init__(self):
        if (self.image is None) == (self.fmap is None):
            raise ValueError("sample needs exactly one of image or fmap")


class AdamState:
    """First/second moment accumulators per parameter array."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Standard bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    t = state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {key}: {g.shape} vs {p.shape}")
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float = 0.001,
    pct_start: float = 0.3,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """One-cycle schedule: cosine warmup to max_lr, cosine anneal to the floor.

    Warmup covers steps [0, pct_start * total_steps]; the anneal ends at
    (max_lr / div_factor) / final_div_factor on the last step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    if not 0 < pct_start < 1:
        raise ValueError("pct_start must be in (0, 1)")
    initial = max_lr / div_factor
    final = initial / final_div_factor
    warm = pct_start * total_steps
    if step <= warm:
        t = step / warm if warm > 0 else 1.0
        return initial + (max_lr - initial) * (1.0 - math.cos(math.pi * t)) / 2.0
    denom = (total_steps - 1) - warm
    t = (step - warm) / denom if denom > 0 else 1.0
    return final + (max_lr - final) * (1.0 + math.cos(math.pi * t)) / 2.0


# ---------------------------------------------------------------------------
# Stratified splitting.


@dataclass
class SplitPlan:
    """Per-sample assignment: "train"/"test" strings or fold indices."""

    kind: str                      # "train_test" | "kfold"
    assignment: list
    labels: list = field(default_factory=list)
    sessions: list = field(default_factory=list)

    def train_indices(self) -> list:
        return [i for i, a in enumerate(self.assignment) if a == "train"]

    def test_indices(self) -> list:
        return [i for i, a in enumerate(self.assignment) if a == "test"]

    def fold_indices(self, fold: int) -> list:
        return [i for i, a in enumerate(self.assignment) if a == fold]

    def fold_complement(self, fold: int) -> list:
        return [i for i, a in enumerate(self.assignment) if a != fold]


def split_train_test(labels, sessions, test_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """Stratified split per (session, class) group.

    Each group is shuffled with its own seeded stream; the test count is
    round(test_fraction * n) and the remainder trains.
    """
    labels = list(labels)
    sessions = list(sessions)
    if len(labels) != len(sessions):
        raise ValueError("labels and sessions must have equal length")
    assignment = [None] * len(labels)
    groups: dict = {}
    for i, (lab, ses) in enumerate(zip(labels, sessions)):
        groups.setdefault((ses, lab), []).append(i)
    for (ses, lab), indices in sorted(groups.items()):
        if len(indices) < 2:
            raise ValueError(
                f"class {lab} in session {ses} has {len(indices)} sample(s); need at least 2"
            )
        stream = prng.stream(seed, int(ses), int(lab))
        order = list(indices)
        stream.shuffle(order)
        n_test = round(test_fraction * len(order))
        for j, idx in enumerate(order):
            assignment[idx] = "test" if j < n_test else "train"
    return SplitPlan("train_test", assignment, labels, sessions)


def kfold_split(labels, k: int = 5, seed: int = 0, sessions=None) -> SplitPlan:
    """Stratified K folds per class: seeded shuffle, then round-robin.

    Per-class fold sizes differ by at most one. A class smaller than K
    warns (some folds miss it) but does not fail.
    """
    if k < 2:
        raise ValueError(f"K must be at least 2, got {k}")
    labels = list(labels)
    sessions = list(sessions) if sessions is not None else [0] * len(labels)
    assignment = [None] * len(labels)
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    for lab, indices in sorted(groups.items()):
        if len(indices) < k:
            warnings.warn(
                f"class {lab} has {len(indices)} samples for {k} folds; "
                "some folds will miss it",
                stacklevel=2,
            )
        stream = prng.stream(seed, int(lab))
        order = list(indices)
        stream.shuffle(order)
        for j, idx in enumerate(order):
            assignment[idx] = j % k
    return SplitPlan("kfold", assignment, labels, sessions)


# ---------------------------------------------------------------------------
# Metrics.


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts with respect to a chosen positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    def f1(self) -> float:
        p, r = self.precision(), self.recall()
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0

    def degenerate(self) -> bool:
        """True when precision or recall had a zero denominator."""
        return (self.tp + self.fp) == 0 or (self.tp + self.fn) == 0

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with the positive/negative roles exchanged."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


def confusion_from_predictions(y_true, y_pred, positive_class: int = 0) -> ConfusionMatrix:
    tp = tn = fp = fn = 0
    for truth, pred in zip(y_true, y_pred, strict=True):
        if pred == positive_class:
            if truth == positive_class:
                tp += 1
            else:
                fp += 1
        else:
            if truth == positive_class:
                fn += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def metrics_summary(cm: ConfusionMatrix, class_names=("female", "male")) -> dict:
    """Accuracy plus per-class and macro precision/recall/F1.

    The supplied matrix is w.r.t. class_names[0] as positive; the second
    class's view swaps the roles.
    """
    views = (cm, cm.swapped())
    per_class = {}
    for name, view in zip(class_names, views):
        per_class[name] = {
            "precision": view.precision(),
            "recall": view.recall(),
            "f1": view.f1(),
            "degenerate": view.degenerate(),
        }
    macro = {
        key: sum(per_class[name][key] for name in class_names) / len(class_names)
        for key in ("precision", "recall", "f1")
    }
    return {
        "accuracy": cm.accuracy(),
        "per_class": per_class,
        "macro": macro,
        "confusion": {"tp": cm.tp, "tn": cm.tn, "fp": cm.fp, "fn": cm.fn},
    }


def evaluate(tree: pt.PrototypeTree, fmaps, labels, positive_class: int = 0):
    """argmax of the soft prediction per map, counted into a confusion matrix.

    Returns (ConfusionMatrix, metrics dict).
    """
    fmaps = list(fmaps)
    labels = list(labels)
    if not fmaps:
        raise ValueError("empty dataset")
    if tree.num_classes != 2:
        raise ValueError("confusion metrics are defined for two classes")
    preds = [int(np.argmax(pt.predict(tree, fm).class_distribution)) for fm in fmaps]
    cm = confusion_from_predictions(labels, preds, positive_class)
    return cm, metrics_summary(cm)


# ---------------------------------------------------------------------------
# Training loop.


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float  # NaN when there is no test set


def _base_only(preset: aug.AugmentPreset) -> aug.AugmentPreset:
    return aug.AugmentPreset(id=0, ops=("base",), params={"base": preset.op_params("base")})


def _sample_features(sample: Sample, preset, backbone, stream) -> FeatureMap:
    if sample.fmap is not None:
        return sample.fmap
    tensor = aug.apply_preset(sample.image, preset, stream)
    return feat.extract(backbone, tensor)


def _eval_features(samples, preset, backbone):
    """Deterministic base-transform features, computed once per run."""
    base = _base_only(preset)
    out = []
    for sample in samples:
        if sample.fmap is not None:
            out.append(sample.fmap)
        else:
            out.append(feat.extract(backbone, aug.apply_preset(sample.image, base, prng.stream(0))))
    return out


def _accuracy(tree, fmaps, labels) -> float:
    correct = sum(
        int(np.argmax(pt.predict(tree, fm).class_distribution)) == lab
        for fm, lab in zip(fmaps, labels)
    )
    return correct / len(labels)


def train_model(
    train_samples,
    config: TrainConfig,
    preset: aug.AugmentPreset,
    backbone: feat.FrozenBackbone | None = None,
    test_samples=(),
):
    """Train a prototype tree on labeled samples.

    Per epoch: seeded shuffle, batching, per-sample augmentation with the
    stream mix(seed, epoch, sample_index), feature extraction, mean batch
    gradients, and an Adam step at the one-cycle learning rate. The
    history records the mean in-epoch train loss plus end-of-epoch train
    and test accuracy under the deterministic base transform.

    Returns (tree, history list of EpochStats).
    """
    samples = list(train_samples)
    test_samples = list(test_samples)
    if not samples:
        raise ValueError("empty dataset")
    image_mode = any(s.image is not None for s in samples + test_samples)
    if image_mode and backbone is None:
        raise ValueError("image samples need a backbone")

    if samples[0].fmap is not None:
        feature_dim = samples[0].fmap.depth
    else:
        feature_dim = backbone.out_channels
    for s in samples + test_samples:
        if s.fmap is not None and s.fmap.depth != feature_dim:
            raise ValueError(
                f"feature-dimension mismatch: {s.fmap.depth} vs {feature_dim}"
            )
        if s.label < 0 or s.label >= config.num_classes:
            raise ValueError(f"label {s.label} out of range")

    tree = pt.init_tree(
        config.tree_depth,
        feature_dim,
        config.num_classes,
        seed=prng.mix(config.seed, _TREE_INIT_TAG),
    )
    params = {"prototypes": tree.prototypes, "leaf_logits": tree.leaf_logits}
    state = AdamState(params)

    n = len(samples)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    # A preset with no stochastic ops yields the same tensor every epoch,
    # so its features can be computed once.
    static_features = preset.ops == ("base",) or all(s.fmap is not None for s in samples)
    train_eval = _eval_features(samples, preset, backbone)
    test_eval = _eval_features(test_samples, preset, backbone)
    train_labels = [s.label for s in samples]
    test_labels = [s.label for s in test_samples]

    history = []
    global_step = 0
    for epoch in range(config.epochs):
        order = list(range(n))
        prng.stream(config.seed, _SHUFFLE_TAG, epoch).shuffle(order)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            lr = onecycle_lr(global_step, total_steps, max_lr=config.learning_rate)
            grad_sum = {k: np.zeros_like(v) for k, v in params.items()}
            for idx in batch:
                sample = samples[idx]
                if static_features:
                    fm = train_eval[idx]
                else:
                    fm = _sample_features(
                        sample, preset, backbone, prng.stream(config.seed, epoch, idx)
                    )
                loss_value, _, grads = pt.value_and_grad(tree, fm, sample.label)
                loss_sum += loss_value
                for key in grad_sum:
                    grad_sum[key] += grads[key]
            batch_grads = {k: v / len(batch) for k, v in grad_sum.items()}
            adam_step(
                params,
                batch_grads,
                state,
                lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.adam_epsilon,
            )
            global_step += 1
        train_acc = _accuracy(tree, train_eval, train_labels)
        test_acc = _accuracy(tree, test_eval, test_labels) if test_samples else float("nan")
        history.append(EpochStats(epoch, loss_sum / n, train_acc, test_acc))
    return tree, history


def write_history_csv(history, path) -> None:
    """CSV with columns epoch, train_loss, train_acc, test_acc."""
    lines = ["epoch,train_loss,train_acc,test_acc"]
    for stats in history:
        lines.append(
            f"{stats.epoch},{stats.train_loss!r},{stats.train_acc!r},{stats.test_acc!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
