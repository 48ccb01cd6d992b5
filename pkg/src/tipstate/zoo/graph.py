from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import ModeError, ShapeMismatch
from ..nn.layers import Conv2D, Layer, layer_from_spec

STRUCTURAL_KINDS = ("Conv2D", "BatchNorm", "MaxPool", "Dense", "GlobalAvgPool")


class NetworkGraph:
    """An ordered stack of layers plus the metadata needed to rebuild it.

    Inputs are image batches shaped (N, H, W) or (N, 1, H, W); outputs are
    per-class confidences shaped (N, num_classes).
    """

    def __init__(self, layers: Iterable[Layer], num_classes: int, input_side: int,
                 architecture_id: str = "custom", hyperparams: dict | None = None,
                 dtype=np.float64, seed: int = 0, classes=None):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.input_side = int(input_side)
        self.architecture_id = architecture_id
        self.hyperparams = dict(hyperparams or {})
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.mode = "train"
        self.classes = (tuple(classes) if classes is not None
                        else tuple(str(i) for i in range(self.num_classes)))
        if len(self.classes) != self.num_classes:
            raise ShapeMismatch(f"{len(self.classes)} class names for {self.num_classes} outputs")
        self._validate()
        rng = np.random.default_rng(self.seed)
        for layer in self.layers:
            layer.init_params(rng, self.dtype)
        first_conv = next((l for l in self.layers if isinstance(l, Conv2D)), None)
        if first_conv is not None and self.layers.index(first_conv) == 0:
            first_conv.need_dx = False

    def _validate(self):
        shape = (self.input_side, self.input_side, 1)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatch as exc:
                raise ShapeMismatch(f"layer {i} ({layer!r}): {exc}") from None
        if shape != (self.num_classes,):
            raise ShapeMismatch(f"network output {shape} != ({self.num_classes},)")

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (channels last) for the configured input side."""
        out, shape = [], (self.input_side, self.input_side, 1)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    # -- mode --------------------------------------------------------------
    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    # -- passes ------------------------------------------------------------
    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 3:
            raise ShapeMismatch(f"expected (N, H, W) or (N, 1, H, W) input, got {x.shape}")
        return x[..., None]

    def forward(self, x, training: bool | None = None):
        training = self.mode == "train" if training is None else training
        out = self._prepare(x)
        for layer in self.layers:
            out = layer.forward(out, training)
        return out

    def backward(self, grad):
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x, batch_size: int = 128):
        """Infer-mode confidences for ``x``, evaluated in chunks."""
        if self.mode != "infer":
            raise ModeError("predict requires an Infer-mode network; call eval() first")
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + batch_size], training=False)
                               for i in range(0, len(x), batch_size)])

    # -- parameter access -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed ``param:``/``buffer:``."""
        st = {f"param:{k}": v.copy() for k, v in self.params().items()}
        st.update({f"buffer:{k}": v.copy() for k, v in self.buffers().items()})
        return st

    def load_state(self, state: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store, prefix in ((layer.params, "param"), (layer.buffers, "buffer")):
                for k in list(store):
                    v = np.asarray(state[f"{prefix}:{i}.{k}"])
                    if v.shape != store[k].shape:
                        raise ShapeMismatch(f"{prefix}:{i}.{k} has shape {v.shape}")
                    store[k][...] = v.astype(self.dtype, copy=False)
        return self

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params().values()))

    def count(self, kind: str) -> int:
        return sum(1 for l in self.layers if l.kind == kind)

    def structural_layer_count(self) -> int:
        """Number of layers other than element-wise activations."""
        return sum(1 for l in self.layers if l.kind in STRUCTURAL_KINDS)

    def layer_specs(self) -> list[dict]:
        return [l.spec() for l in self.layers]

    @classmethod
    def from_specs(cls, specs, **kwargs):
        return cls([layer_from_spec(s) for s in specs], **kwargs)

    def __repr__(self):
        return (f"NetworkGraph({self.architecture_id!r}, classes={self.num_classes}, "
                f"side={self.input_side}, layers={len(self.layers)}, params={self.param_count()})")
