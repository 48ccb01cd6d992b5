"""Class-weighted training loop, evaluation pass and the two-network Si scheme."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .augment import TIPCHANGE_POLICY, AugmentPolicy, augment_dataset, default_policies
from .ensemble import Prediction
from .errors import DataError, EmptyTrainSet, LabelOutOfRange, ModeError
from .imagecore import (ClassStats, DatasetSplit, LabeledSample, class_names, class_stats, resize)
from .metrics import balanced_accuracy, confusion_matrix
from .nn.losses import LossSpec, loss
from .nn.optim import OptimizerState, canonical_rule, lr_schedule, optimizer_step
from .seeding import derive_seed
from .zoo import NetworkGraph, build


@dataclass
class TrainConfig:
    batch_size: int = 128
    image_side: int = 128
    epochs: int = 30
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    loss_kind: str = "BinaryCrossEntropy"
    seed: int = 0
    early_stop_patience: int = 10
    augment_repeats: int = 0
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalisation)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.augment_repeats < 0:
            raise ValueError("augment_repeats must be >= 0")
        canonical_rule(self.optimizer)

    def loss_spec(self, stats: ClassStats, classes: Sequence[str]) -> LossSpec:
        return LossSpec(self.loss_kind, stats.weight_vector(classes))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    balanced_accuracy: list[float] = field(default_factory=list)
    train_balanced_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    augmentation: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def stopped_epoch(self) -> int:
        return len(self.train_loss)

    def __eq__(self, other):
        if not isinstance(other, TrainHistory):
            return NotImplemented
        return asdict(self) == asdict(other)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss", "balanced_accuracy",
                        "train_balanced_accuracy"])
            for e in range(self.stopped_epoch):
                w.writerow([e + 1, repr(self.train_loss[e]), repr(self.test_loss[e]),
                            repr(self.balanced_accuracy[e]), repr(self.train_balanced_accuracy[e])])
        return path


def _images(samples: Sequence[LabeledSample], side: int, dtype) -> np.ndarray:
    out = np.empty((len(samples), side, side), dtype=dtype)
    for i, s in enumerate(samples):
        img = s.image if s.image.shape == (side, side) else resize(s.image, side)
        out[i] = img.values
    return out


def _labels(samples, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[s.label.name] for s in samples], dtype=np.int64)
    except KeyError as exc:
        raise LabelOutOfRange(f"label {exc.args[0]!r} is not one of {tuple(classes)}") from None


def _resolve_classes(net: NetworkGraph, stats: ClassStats) -> tuple[str, ...]:
    default = tuple(str(i) for i in range(net.num_classes))
    if net.classes == default and stats.classes != default:
        if len(stats.classes) != net.num_classes:
            raise LabelOutOfRange(
                f"{len(stats.classes)} classes in the statistics for a {net.num_classes}-way net")
        net.classes = tuple(stats.classes)
    return net.classes


def augmentation_audit(samples: Sequence[LabeledSample]) -> dict[str, dict[str, int]]:
    """Per-class counts of applied augmentation operations."""
    audit: dict[str, Counter] = {}
    for s in samples:
        ops = s.meta.get("ops") if isinstance(s.meta, Mapping) else None
        if ops is None:
            continue
        c = audit.setdefault(s.label.name, Counter())
        c["copies"] += 1
        for op in ops:
            c[op[1] if op[0] == "flip" else op[0]] += 1
    return {k: dict(sorted(v.items())) for k, v in sorted(audit.items())}


def _predict(net, x, batch_size):
    was = net.mode
    net.eval()
    try:
        return net.predict(x, batch_size)
    finally:
        net.mode = was


def train(net: NetworkGraph, split: DatasetSplit, stats: ClassStats, cfg: TrainConfig,
          policies: Mapping[str, AugmentPolicy] | None = None,
          progress: Callable[[int, TrainHistory], None] | None = None):
    """Mini-batch training with per-sample class weights and early stopping.

    When ``cfg.augment_repeats`` > 0 the training part is expanded once with
    seeded augmented copies (``policies`` default to the per-class defaults).
    The last partial batch of every epoch is dropped.  Returns the network
    restored to its lowest-test-loss epoch (in Infer mode) and the history.
    """
    if not split.train:
        raise EmptyTrainSet("training split is empty")
    classes = _resolve_classes(net, stats)
    train_samples = list(split.train)
    _labels(train_samples, classes)
    history = TrainHistory()
    if cfg.augment_repeats > 0:
        policies = dict(policies or default_policies(classes))
        policies = {k: replace(p, repeats=cfg.augment_repeats) for k, p in policies.items()}
        train_samples = augment_dataset(train_samples, policies, derive_seed(cfg.seed, "augment"))
        history.augmentation = augmentation_audit(train_samples)

    side, dtype = net.input_side, net.dtype
    x_train = _images(train_samples, side, dtype)
    y_train = _labels(train_samples, classes)
    test = list(split.test)
    x_test = _images(test, side, dtype)
    y_test = _labels(test, classes)
    c = len(classes)
    eye = np.eye(c, dtype=dtype)
    spec = cfg.loss_spec(stats, classes)
    opt = OptimizerState(cfg.optimizer, cfg.learning_rate)
    n = len(y_train)
    bs = min(cfg.batch_size, n)
    if bs < 2:
        raise EmptyTrainSet("need at least two training samples for a batch-normalised step")
    n_batches = n // bs

    best_loss, best_state, since_best = np.inf, net.state(), 0
    for epoch in range(cfg.epochs):
        net.train()
        lr = lr_schedule(cfg.learning_rate, epoch, cfg.lr_decay)
        order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
        total, preds = 0.0, np.empty(n_batches * bs, dtype=np.int64)
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            out = net.forward(x_train[idx], training=True)
            value, grad = loss(out, eye[y_train[idx]], spec)
            net.backward(grad)
            optimizer_step(opt, net.params(), net.grads(), lr)
            total += float(value)
            preds[b * bs:(b + 1) * bs] = out.argmax(axis=1)
        seen = y_train[order[:n_batches * bs]]
        history.train_loss.append(total / n_batches)
        history.train_balanced_accuracy.append(_safe_bal_acc(preds, seen, c))

        if len(test):
            out = _predict(net, x_test, cfg.eval_batch_size)
            test_loss = float(loss(out, eye[y_test], spec)[0])
            history.balanced_accuracy.append(_safe_bal_acc(out.argmax(axis=1), y_test, c))
        else:
            test_loss = history.train_loss[-1]
            history.balanced_accuracy.append(history.train_balanced_accuracy[-1])
        history.test_loss.append(test_loss)
        if test_loss < best_loss:
            best_loss, best_state, since_best = test_loss, net.state(), 0
            history.best_epoch = epoch + 1
        else:
            since_best += 1
        if progress is not None:
            progress(epoch + 1, history)
        if since_best >= cfg.early_stop_patience:
            break
    net.load_state(best_state)
    return net.eval(), history


def _safe_bal_acc(pred_idx, true_idx, c) -> float:
    """Macro recall over the classes present in ``true_idx``."""
    cm = confusion_matrix(pred_idx, true_idx, [str(i) for i in range(c)])
    present = cm.sum(axis=1) > 0
    if present.all():
        return balanced_accuracy(cm)
    return float((np.diag(cm[:, :c])[present] / cm.sum(axis=1)[present]).mean())


def evaluate(net: NetworkGraph, samples: Sequence, batch_size: int = 128) -> list[Prediction]:
    """One confidence vector per sample from an Infer-mode network."""
    if net.mode != "infer":
        raise ModeError("evaluate requires an Infer-mode network")
    x = _images([s for s in samples], net.input_side, net.dtype) if samples and isinstance(
        samples[0], LabeledSample) else np.asarray(samples, dtype=net.dtype)
    conf = net.predict(x, batch_size)
    return [Prediction(net.classes, row) for row in conf]


def evaluate_array(net: NetworkGraph, samples: Sequence[LabeledSample], batch_size: int = 128):
    if net.mode != "infer":
        raise ModeError("evaluate requires an Infer-mode network")
    return net.predict(_images(samples, net.input_side, net.dtype), batch_size)


def train_si_scheme(four_class_split: DatasetSplit, tipchange_split: DatasetSplit,
                    cfgs: tuple[TrainConfig, TrainConfig] | TrainConfig,
                    arch: str = "squeezenet", **arch_kw):
    """Train the four-class H:Si(100) net and the separate tip-change net.

    The binary net only ever sees horizontal flips and Gaussian noise.  Each
    returned network carries its history as ``train_history``.
    """
    cfg4, cfg2 = (cfgs, cfgs) if isinstance(cfgs, TrainConfig) else cfgs
    four = class_names("si4")
    binary = class_names("si-tipchange")
    for part in ("train", "test", "holdout"):
        if any(s.label.name == "TipChange" for s in getattr(four_class_split, part)):
            raise DataError(f"four-class {part} split contains TipChange samples")
        if any(s.label.name not in binary for s in getattr(tipchange_split, part)):
            raise DataError(f"binary {part} split has labels outside {binary}")
    dtype = arch_kw.pop("dtype", np.float32)

    net4 = build(arch, 4, cfg4.image_side, dtype=dtype, seed=derive_seed(cfg4.seed, "init4"),
                 **arch_kw)
    net4.classes = four
    net4, h4 = train(net4, four_class_split, class_stats(four_class_split.train, four), cfg4)

    net2 = build(arch, 2, cfg2.image_side, dtype=dtype, seed=derive_seed(cfg2.seed, "init2"),
                 **arch_kw)
    net2.classes = binary
    restricted = {c: TIPCHANGE_POLICY for c in binary}
    net2, h2 = train(net2, tipchange_split, class_stats(tipchange_split.train, binary), cfg2,
                     policies=restricted)
    net4.train_history, net2.train_history = h4, h2
    return net4, net2
