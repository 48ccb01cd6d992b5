"""Layer objects with cached forward state and explicit backward passes.

All 4-D activations are channels-last (N, H, W, C).  Every layer exposes
``params``/``grads`` (trainable) and ``buffers`` (running statistics) as
plain dicts of arrays so optimisers and checkpoints can walk them.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F

LAYER_KINDS = ("Conv2D", "BatchNorm", "Elu", "Sigmoid", "Softmax", "MaxPool",
               "Dense", "GlobalAvgPool")


class Layer:
    kind = ""
    trainable = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Shape (excluding batch) produced for an input of ``shape``."""
        return shape

    def config(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def init_params(self, rng, dtype):
        pass

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({cfg})"


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = "Conv2D"
    trainable = True

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding="same"):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), padding
        self.need_dx = True

    def config(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def init_params(self, rng, dtype):
        k = self.kernel
        self.params["w"] = he_uniform(rng, (k, k, self.in_ch, self.out_ch),
                                      k * k * self.in_ch, dtype)
        self.params["b"] = np.zeros(self.out_ch, dtype=dtype)

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.in_ch:
            raise ShapeMismatch(f"Conv2D expects {self.in_ch} channels, got {c}")
        ho = F._resolve_padding(h, self.stride, self.kernel, self.padding)[0]
        wo = F._resolve_padding(w, self.stride, self.kernel, self.padding)[0]
        return (ho, wo, self.out_ch)

    def forward(self, x, training=False):
        out, cols, geom = F.conv2d_forward_nhwc(x, self.params["w"], self.params["b"],
                                                self.stride, self.padding)
        self._cache = (x.shape, cols, geom) if training else None
        return out

    def backward(self, grad):
        x_shape, cols, geom = self._cache
        dx, dw, db = F.conv2d_backward_nhwc(x_shape, cols, geom, self.params["w"], grad,
                                            self.stride, self.need_dx)
        self.grads["w"] = dw
        self.grads["b"] = db
        self._cache = None
        return dx


class BatchNorm(Layer):
    kind = "BatchNorm"
    trainable = True

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = int(channels), float(momentum), float(eps)

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def init_params(self, rng, dtype):
        c = self.channels
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def output_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeMismatch(f"BatchNorm expects {self.channels} channels, got {shape[-1]}")
        return shape

    def forward(self, x, training=False):
        out, cache, rm, rv = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], training,
            self.buffers["running_mean"], self.buffers["running_var"],
            self.momentum, self.eps)
        if training:
            self.buffers["running_mean"] = rm.astype(x.dtype, copy=False)
            self.buffers["running_var"] = rv.astype(x.dtype, copy=False)
            self._cache = cache
        return out

    def backward(self, grad):
        dx, dgamma, dbeta = F.batchnorm_backward(grad, self._cache, self.params["gamma"])
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        self._cache = None
        return dx


class Elu(Layer):
    kind = "Elu"

    def forward(self, x, training=False):
        out = F.elu(x)
        if training:
            self._cache = (x, out)
        return out

    def backward(self, grad):
        x, out = self._cache
        self._cache = None
        return F.elu_backward(x, out, grad)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, training=False):
        out = F.sigmoid(x)
        if training:
            self._cache = out
        return out

    def backward(self, grad):
        out = self._cache
        return grad * out * (1.0 - out)


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, training=False):
        out = F.softmax(x)
        if training:
            self._cache = out
        return out

    def backward(self, grad):
        return F.softmax_backward(self._cache, grad)


class MaxPool(Layer):
    kind = "MaxPool"

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)

    def config(self):
        return {"size": self.size}

    def output_shape(self, shape):
        h, w, c = shape
        if h < self.size or w < self.size:
            raise ShapeMismatch(f"MaxPool input {shape} too small")
        return (h // self.size, w // self.size, c)

    def forward(self, x, training=False):
        out, idx = F.maxpool_forward(x, self.size)
        if training:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad):
        idx, shape = self._cache
        self._cache = None
        return F.maxpool_backward(grad, idx, shape, self.size)


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def output_shape(self, shape):
        return (shape[-1],)

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._cache
        return np.broadcast_to(grad[:, None, None, :] / (h * w), (n, h, w, c)).copy()


class Dense(Layer):
    """Fully connected layer; inputs of rank > 2 are flattened (NHWC order)."""

    kind = "Dense"
    trainable = True

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def init_params(self, rng, dtype):
        self.params["w"] = he_uniform(rng, (self.in_features, self.out_features),
                                      self.in_features, dtype)
        self.params["b"] = np.zeros(self.out_features, dtype=dtype)

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.in_features:
            raise ShapeMismatch(f"Dense expects {self.in_features} features, got {shape}")
        return (self.out_features,)

    def forward(self, x, training=False):
        x2 = x.reshape(x.shape[0], -1)
        if training:
            self._cache = (x2, x.shape)
        return x2 @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        x2, shape = self._cache
        self._cache = None
        self.grads["w"] = x2.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return (grad @ self.params["w"].T).reshape(shape)


_REGISTRY = {cls.kind: cls for cls in (Conv2D, BatchNorm, Elu, Sigmoid, Softmax,
                                       MaxPool, GlobalAvgPool, Dense)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)
