from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch

LOG_CLAMP = 1e-7
LOSS_KINDS = ("BinaryCrossEntropy", "CategoricalCrossEntropy")


@dataclass(frozen=True)
class LossSpec:
    """Loss family plus per-class weights (indexed like the network outputs).

    Weights apply per sample, selected by the sample's true class, so the
    weighted loss of a constant predictor does not depend on class balance
    when the weights are reciprocal frequencies.
    """

    kind: str = "BinaryCrossEntropy"
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if any(not v > 0 for v in w):
                raise ValueError("class weights must be strictly positive")
            object.__setattr__(self, "class_weights", w)

    def weights_for(self, num_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(num_classes)
        if len(self.class_weights) != num_classes:
            raise ShapeMismatch(
                f"{len(self.class_weights)} class weights for {num_classes} classes")
        return np.asarray(self.class_weights)


def loss(pred, target, spec: LossSpec = LossSpec()):
    """Weighted cross-entropy and its gradient with respect to ``pred``.

    ``pred`` holds output-layer confidences, shape (batch, classes); ``target``
    is one-hot of the same shape.  Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs; the gradient is evaluated at the
    clamped value.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != 2 or pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    n, c = pred.shape
    dtype = pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64
    w = spec.weights_for(c)[target.argmax(axis=1)].astype(dtype)[:, None]
    p = np.clip(pred, LOG_CLAMP, 1.0 - LOG_CLAMP)
    if spec.kind == "BinaryCrossEntropy":
        terms = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
        value = float((w * terms).sum() / (n * c))
        grad = w * (p - target) / (p * (1.0 - p)) / (n * c)
    else:
        value = float((w[:, 0] * -np.log((p * target).sum(axis=1))).sum() / n)
        grad = -w * target / p / n
    return value, grad.astype(dtype, copy=False)
