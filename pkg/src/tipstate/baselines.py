"""Reference classifiers: uniform random guessing and a CART random forest."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import Prediction
from .errors import DataError, EmptyTrainSet
from .imagecore import LabeledSample, ScanImage, resample
from .seeding import derive_seed
from .zoo.checkpoint import read_container, write_container

FOREST_ID = "rfc"


def random_guess_scores(num_classes: int, n: int, seed: int) -> np.ndarray:
    """Independent U(0, 1) confidences per class; the argmax is a uniform class draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).random((n, num_classes))


def random_guess(classes: Sequence[str], n: int, seed: int) -> list[Prediction]:
    classes = tuple(classes)
    return [Prediction(classes, row) for row in random_guess_scores(len(classes), n, seed)]


# -- CART ----------------------------------------------------------------------

def gini(counts) -> np.ndarray:
    """Gini impurity of class-count vectors along the last axis."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return np.where(n > 0, 1.0 - (p * p).sum(axis=-1), 0.0)


def best_split(X, y, features, num_classes):
    """Minimum weighted-Gini threshold split over ``features``.

    Candidate thresholds are midpoints between consecutive distinct values;
    samples with ``x <= threshold`` go left.  Returns
    ``(feature, threshold, weighted_impurity)`` or ``None`` if every
    candidate feature is constant.  Ties resolve to the earliest feature in
    ``features``, then the lowest threshold.
    """
    n = len(y)
    feats = np.asarray(features)
    vals = X[:, feats]
    order = np.argsort(vals, axis=0, kind="mergesort")
    sv = np.take_along_axis(vals, order, axis=0)
    onehot = np.eye(num_classes)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]
    total = onehot.sum(axis=0)
    right = total - left
    nl = np.arange(1, n)[:, None]
    score = (nl * gini(left) + (n - nl) * gini(right)) / n
    valid = sv[1:] > sv[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    # column-major argmin -> earliest feature first, then lowest position
    flat = np.argmin(score.T)
    fi, pos = divmod(int(flat), n - 1)
    thr = (sv[pos, fi] + sv[pos + 1, fi]) / 2.0
    return int(feats[fi]), float(thr), float(score[pos, fi])


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # per-node class distribution (rows sum to 1)

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def apply(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def grow_tree(X, y, num_classes, max_features, max_depth=None, min_samples_split=2,
              rng=None) -> DecisionTree:
    rng = rng or np.random.default_rng(0)
    n_features = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=num_classes).astype(np.float64)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / counts.sum())
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        if (len(idx) < min_samples_split or (max_depth is not None and depth >= max_depth)
                or (ys == ys[0]).all()):
            continue
        feats = (np.arange(n_features) if max_features >= n_features
                 else np.sort(rng.choice(n_features, max_features, replace=False)))
        split = best_split(X[idx], ys, feats, num_classes)
        if split is None:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(value).reshape(-1, num_classes))


# -- forest --------------------------------------------------------------------

@dataclass
class ForestConfig:
    tree_count: int = 100
    max_features: int | str = "sqrt"
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True
    side: int = 32
    seed: int = 0


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    classes: tuple[str, ...]
    config: ForestConfig
    max_features: int = 0

    @property
    def tree_count(self) -> int:
        return len(self.trees)


def image_features(images, side: int) -> np.ndarray:
    """Bilinearly downsample each image to ``side`` x ``side`` and flatten."""
    out = []
    for im in images:
        v = im.values if isinstance(im, ScanImage) else np.asarray(im)
        out.append(resample(v, side, side).ravel())
    return np.array(out).reshape(len(out), side * side)


def _resolve_max_features(spec, n_features):
    if spec == "sqrt":
        return max(1, int(np.sqrt(n_features)))
    if spec in (None, "all"):
        return n_features
    return max(1, min(int(spec), n_features))


def forest_fit(X, y, classes: Sequence[str], config: ForestConfig = ForestConfig()) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyTrainSet("random forest needs at least one training sample")
    if config.tree_count < 1:
        raise ValueError("tree_count must be >= 1")
    k = len(classes)
    mf = _resolve_max_features(config.max_features, X.shape[1])
    trees = []
    for t in range(config.tree_count):
        rng = np.random.default_rng(derive_seed(config.seed, "tree", t))
        idx = rng.integers(0, len(y), len(y)) if config.bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[idx], y[idx], k, mf, config.max_depth,
                               config.min_samples_split, rng))
    return ForestModel(trees, tuple(classes), config, mf)


def forest_train(samples: Sequence[LabeledSample], config: ForestConfig = ForestConfig(),
                 classes: Sequence[str] | None = None) -> ForestModel:
    """Train on raw downsampled pixels of ``samples``."""
    if not samples:
        raise EmptyTrainSet("random forest needs at least one training sample")
    classes = tuple(classes) if classes is not None else tuple(sorted({s.label.name for s in samples}))
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[s.label.name] for s in samples])
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in class list") from None
    return forest_fit(image_features([s.image for s in samples], config.side), y, classes, config)


def forest_predict_proba(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    acc = np.zeros((len(X), len(model.classes)))
    for tree in model.trees:
        acc += tree.predict_proba(X)
    return acc / len(model.trees)


def forest_predict_images(model: ForestModel, images) -> np.ndarray:
    return forest_predict_proba(model, image_features(images, model.config.side))


def forest_predict(model: ForestModel, img: ScanImage) -> Prediction:
    return Prediction(model.classes, forest_predict_images(model, [img])[0])


def save_forest(model: ForestModel, path):
    offsets = np.cumsum([0] + [t.node_count for t in model.trees])
    cat = lambda attr: np.concatenate([getattr(t, attr) for t in model.trees])
    blobs = {
        "offsets": offsets.astype(np.float64),
        "feature": cat("feature").astype(np.float64),
        "threshold": cat("threshold"),
        "left": cat("left").astype(np.float64),
        "right": cat("right").astype(np.float64),
        "value": np.concatenate([t.value for t in model.trees]),
    }
    hp = asdict(model.config)
    meta = {"classes": list(model.classes), "max_features_resolved": model.max_features}
    return write_container(path, FOREST_ID, hp, blobs, meta)


def load_forest(path) -> ForestModel:
    header, b = read_container(path)
    if header["architecture_id"] != FOREST_ID:
        raise DataError(f"{path}: not a random-forest checkpoint")
    offsets = b["offsets"].astype(np.int64)
    trees = []
    for s, e in zip(offsets[:-1], offsets[1:]):
        trees.append(DecisionTree(b["feature"][s:e].astype(np.int64), b["threshold"][s:e].copy(),
                                  b["left"][s:e].astype(np.int64),
                                  b["right"][s:e].astype(np.int64), b["value"][s:e].copy()))
    meta = header["meta"]
    return ForestModel(trees, tuple(meta["classes"]), ForestConfig(**header["hyperparams"]),
                       meta["max_features_resolved"])
