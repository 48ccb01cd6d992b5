"""Majority-voting ensembles and the desirable/undesirable ("good/bad") collapse."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ClassSetMismatch, DataError, UnmappedClass
from .imagecore import CLASS_SETS, Desirability, ScanImage

ABSTAIN = -1
TIE_RULES = ("MeanConfidence",)
GOOD, BAD = "Good", "Bad"
GOOD_BAD_CLASSES = (GOOD, BAD)


@dataclass(frozen=True, eq=False)
class Prediction:
    classes: tuple[str, ...]
    confidences: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidences, dtype=np.float64)
        if conf.shape != (len(self.classes),):
            raise ClassSetMismatch(f"{conf.shape} confidences for {len(self.classes)} classes")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "confidences", conf)

    @property
    def argmax_index(self) -> int:
        return int(self.confidences.argmax())

    @property
    def argmax_class(self) -> str:
        return self.classes[self.argmax_index]

    @property
    def argmax_confidence(self) -> float:
        return float(self.confidences.max())

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.classes, self.confidences.tolist()))


def predictions_from_array(conf, classes) -> list[Prediction]:
    return [Prediction(tuple(classes), row) for row in np.asarray(conf)]


def mean_confidences(preds: Sequence[Prediction]) -> Prediction:
    """Per-class arithmetic mean over member predictions."""
    if not preds:
        raise DataError("no predictions to average")
    classes = preds[0].classes
    if any(p.classes != classes for p in preds):
        raise ClassSetMismatch("member predictions use different class sets")
    return Prediction(classes, np.mean([p.confidences for p in preds], axis=0))


def vote(member_conf, threshold: float = 0.0) -> int:
    """Aggregate one image's member confidences (M, C) into a class index.

    Members whose top confidence is below ``threshold`` abstain.  The most
    frequent vote wins; ties between equally frequent classes go to the
    highest mean confidence over all members (lowest index if still tied).
    Returns ``ABSTAIN`` when every member abstains.
    """
    conf = np.asarray(member_conf, dtype=np.float64)
    votes = conf.argmax(axis=1)
    active = conf.max(axis=1) >= threshold
    if not active.any():
        return ABSTAIN
    counts = np.bincount(votes[active], minlength=conf.shape[1])
    best = np.flatnonzero(counts == counts.max())
    if len(best) == 1:
        return int(best[0])
    means = conf.mean(axis=0)[best]
    return int(best[np.argmax(means)])


def vote_batch(member_conf, threshold: float = 0.0) -> np.ndarray:
    """``vote`` over a stack shaped (M, N, C); returns N class indices / ABSTAIN."""
    conf = np.asarray(member_conf)
    return np.array([vote(conf[:, n], threshold) for n in range(conf.shape[1])], dtype=np.int64)


def abstention_count(member_conf, threshold: float) -> int:
    """Number of (member, image) pairs whose top confidence is below ``threshold``."""
    return int((np.asarray(member_conf).max(axis=-1) < threshold).sum())


@dataclass
class EnsembleModel:
    members: list
    threshold: float = 0.0
    tie_rule: str = "MeanConfidence"
    member_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise DataError("an ensemble needs at least one member")
        if self.tie_rule not in TIE_RULES:
            raise ValueError(f"tie_rule must be one of {TIE_RULES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        first = self.members[0]
        for m in self.members[1:]:
            if tuple(m.classes) != tuple(first.classes):
                raise ClassSetMismatch(f"member classes {m.classes} != {first.classes}")
            if m.input_side != first.input_side:
                raise ClassSetMismatch("members disagree on input side")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.members[0].classes)

    @property
    def input_side(self) -> int:
        return self.members[0].input_side

    def member_confidences(self, images, batch_size: int = 128) -> np.ndarray:
        """Stacked member outputs, shape (M, N, C)."""
        return np.stack([m.predict(images, batch_size) for m in self.members])

    def predict_batch(self, images, batch_size: int = 128):
        """Returns (member confidences (M, N, C), mean confidences (N, C), votes (N,))."""
        conf = self.member_confidences(images, batch_size)
        return conf, conf.mean(axis=0), vote_batch(conf, self.threshold)


def ensemble_predict(model: EnsembleModel, img: ScanImage | np.ndarray):
    """Member predictions and the aggregated vote (class name or ``"Abstain"``)."""
    values = img.values if isinstance(img, ScanImage) else np.asarray(img)
    conf = model.member_confidences(values[None])[:, 0]
    preds = [Prediction(model.classes, c) for c in conf]
    k = vote(conf, model.threshold)
    return preds, ("Abstain" if k == ABSTAIN else model.classes[k])


def write_ensemble_manifest(path, member_paths: Sequence, threshold=0.0,
                            tie_rule="MeanConfidence") -> Path:
    path = Path(path)
    base = path.parent.resolve()
    rel = []
    for p in member_paths:
        p = Path(p).resolve()
        try:
            rel.append(str(p.relative_to(base)))
        except ValueError:
            rel.append(str(p))
    doc = {"members": rel, "threshold": float(threshold), "tie_rule": tie_rule}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def load_ensemble(path, threshold: float | None = None) -> EnsembleModel:
    from .zoo import load_checkpoint

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        member_paths = [str(path.parent / m) for m in doc["members"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed ensemble manifest ({exc})") from None
    members = [load_checkpoint(p) for p in member_paths]
    thr = doc.get("threshold", 0.0) if threshold is None else threshold
    return EnsembleModel(members, float(thr), doc.get("tie_rule", "MeanConfidence"), member_paths)


# -- good/bad collapse ---------------------------------------------------------

@dataclass(frozen=True)
class GoodBadMap:
    mapping: Mapping[str, str]

    def __post_init__(self):
        bad = {k: v for k, v in self.mapping.items() if v not in GOOD_BAD_CLASSES}
        if bad:
            raise DataError(f"good/bad map values must be Good or Bad: {bad}")

    @classmethod
    def from_class_set(cls, key: str) -> "GoodBadMap":
        return cls({c.name: GOOD if c.desirability is Desirability.Desirable else BAD
                    for c in CLASS_SETS[key]})

    def check_total(self, classes: Sequence[str]):
        missing = [c for c in classes if c not in self.mapping]
        if missing:
            raise UnmappedClass(f"classes without a good/bad mapping: {missing}")

    def good_mask(self, classes: Sequence[str]) -> np.ndarray:
        self.check_total(classes)
        return np.array([self.mapping[c] == GOOD for c in classes])


SI_GOOD_BAD = GoodBadMap.from_class_set("si4")
METAL_GOOD_BAD = GoodBadMap.from_class_set("metal6")


def collapse_labels(labels: Sequence, classes: Sequence[str], gb: GoodBadMap) -> np.ndarray:
    """Map class indices (or -1 abstain) to 0 = Good, 1 = Bad, -1 abstain."""
    good = gb.good_mask(classes)
    lab = np.asarray(labels, dtype=np.int64)
    out = np.where(good[np.clip(lab, 0, None)], 0, 1)
    return np.where(lab < 0, ABSTAIN, out)


def collapse_scores(conf, classes: Sequence[str], gb: GoodBadMap) -> np.ndarray:
    """(N, 2) scores [Good, Bad]: confidence mass on good classes over total mass."""
    good = gb.good_mask(classes)
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum(axis=1)
    g = np.divide(conf[:, good].sum(axis=1), total, out=np.full(len(conf), 0.5), where=total > 0)
    return np.stack([g, 1.0 - g], axis=1)


def collapse_confusion(confusion, classes: Sequence[str], gb: GoodBadMap) -> np.ndarray:
    """Sum a (C, C+1) confusion matrix into the (2, 3) Good/Bad/abstain one."""
    cm = np.asarray(confusion)
    good = gb.good_mask(classes)
    c = len(classes)
    groups = [np.flatnonzero(good), np.flatnonzero(~good)]
    out = np.zeros((2, 3), dtype=cm.dtype)
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            out[i, j] = cm[np.ix_(gi, gj)].sum()
        out[i, 2] = cm[gi, c].sum()
    return out
