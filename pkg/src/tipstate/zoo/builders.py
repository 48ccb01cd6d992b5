"""Builders for the three CNN families used for tip-state classification."""
from __future__ import annotations

import numpy as np

from ..nn.layers import (BatchNorm, Conv2D, Dense, Elu, GlobalAvgPool, MaxPool,
                         Sigmoid, Softmax)
from .graph import NetworkGraph

SQUEEZE_CHANNELS = (32, 64, 64, 128, 128, 256, 256, 512, 512, 1024)
SQUEEZE_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2, 1, 2)
VGG_CHANNELS = (32, 64, 128, 256)
VGG_HIDDEN = 256
RW_CHANNELS = (16, 32)
RW_HIDDEN = 128
HEADS = ("sigmoid", "softmax")


def _head(kind):
    if kind not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    return Sigmoid() if kind == "sigmoid" else Softmax()


def _scaled(channels, width):
    return tuple(max(1, int(round(c * width))) for c in channels)


def build_squeezenet_like(num_classes, input_side=128, *, width=1.0, depth=10,
                          head="sigmoid", dtype=np.float64, seed=0):
    """Ten 3x3 conv layers (32 -> 1024 filters, strides 1,2,1,2,...), each
    followed by batch norm and ELU, then global average pooling and a dense
    classifier.  ``width`` scales every channel count and ``depth`` truncates
    the conv stack; both exist for cheap test variants.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    chans = _scaled(SQUEEZE_CHANNELS[:depth], width)
    layers, prev = [], 1
    for c, s in zip(chans, SQUEEZE_STRIDES[:depth]):
        layers += [Conv2D(prev, c, 3, s), BatchNorm(c), Elu()]
        prev = c
    layers += [GlobalAvgPool(), Dense(prev, num_classes), _head(head)]
    hp = {"num_classes": num_classes, "input_side": input_side, "width": width,
          "depth": depth, "head": head}
    return NetworkGraph(layers, num_classes, input_side, "squeezenet", hp, dtype, seed)


def build_vgg_like(num_classes, with_batchnorm=False, input_side=128, *, width=1.0,
                   blocks=4, hidden=VGG_HIDDEN, head="sigmoid", dtype=np.float64, seed=0):
    """Reduced VGG: blocks of [conv3x3, conv3x3, maxpool2] with 32/64/128/256
    filters, optional batch norm after each conv, ELU activations, and a
    dense(256) -> dense(num_classes) head."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    chans = _scaled(VGG_CHANNELS[:blocks], width)
    layers, prev, side = [], 1, input_side
    for c in chans:
        for _ in range(2):
            layers.append(Conv2D(prev, c, 3, 1))
            if with_batchnorm:
                layers.append(BatchNorm(c))
            layers.append(Elu())
            prev = c
        layers.append(MaxPool(2))
        side //= 2
    units = max(1, int(round(hidden * width)))
    layers += [Dense(side * side * prev, units), Elu(), Dense(units, num_classes), _head(head)]
    arch = "vgg-bn" if with_batchnorm else "vgg"
    hp = {"num_classes": num_classes, "input_side": input_side, "width": width,
          "blocks": blocks, "hidden": hidden, "head": head}
    return NetworkGraph(layers, num_classes, input_side, arch, hp, dtype, seed)


def build_rw(num_classes, input_side=32, *, head="sigmoid", dtype=np.float64, seed=0):
    """Small two-conv surrogate for the Rashidi-Wolkow tip classifier.

    Not a replication of that network: conv(16) -> pool -> conv(32) -> pool
    -> dense(128) -> dense(num_classes).
    """
    if input_side not in (32, 64, 128):
        raise ValueError("RW surrogate supports input sides 32, 64, 128")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c1, c2 = RW_CHANNELS
    side = input_side // 4
    layers = [Conv2D(1, c1), Elu(), MaxPool(2), Conv2D(c1, c2), Elu(), MaxPool(2),
              Dense(side * side * c2, RW_HIDDEN), Elu(), Dense(RW_HIDDEN, num_classes),
              _head(head)]
    hp = {"num_classes": num_classes, "input_side": input_side, "head": head}
    return NetworkGraph(layers, num_classes, input_side, "rw", hp, dtype, seed)


def _vgg_bn(num_classes, input_side=128, **kw):
    return build_vgg_like(num_classes, True, input_side, **kw)


def _vgg(num_classes, input_side=128, **kw):
    return build_vgg_like(num_classes, False, input_side, **kw)


BUILDERS = {
    "squeezenet": build_squeezenet_like,
    "vgg": _vgg,
    "vgg-bn": _vgg_bn,
    "rw": build_rw,
}


def build(architecture_id: str, num_classes: int, input_side: int = 128, **kwargs):
    """Build any registered family by id (``squeezenet``, ``vgg``, ``vgg-bn``, ``rw``)."""
    try:
        builder = BUILDERS[architecture_id]
    except KeyError:
        raise ValueError(f"unknown architecture {architecture_id!r}") from None
    return builder(num_classes, input_side=input_side, **kwargs)
