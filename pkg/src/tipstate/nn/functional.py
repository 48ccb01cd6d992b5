"""Stateless forward/backward kernels.

The network engine works in channels-last (N, H, W, C) layout because the
im2col matrix then maps straight onto a single GEMM.  The public
``conv2d_forward``/``conv2d_backward``/``batchnorm`` wrappers take the
conventional (batch, channels, height, width) layout and convert.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BatchTooSmall, ShapeMismatch

ELU_ALPHA = 1.0


def same_padding(size: int, stride: int, kernel: int = 3) -> tuple[int, int, int]:
    """Output size and (before, after) padding for "same" convolution.

    Output is ``ceil(size / stride)``; any odd leftover pad goes after the
    input, so stride-2 layers on even inputs pad only the bottom/right.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _resolve_padding(size, stride, kernel, padding):
    if padding == "same":
        return same_padding(size, stride, kernel)
    p = int(padding)
    out = (size + 2 * p - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatch(f"padding {p} too small for input {size}")
    return out, p, p


def im2col(x, kernel, stride, padding="same"):
    """Patch matrix of an NHWC tensor, rows ordered (n, i, j), cols (ki, kj, c)."""
    n, h, w, c = x.shape
    ho, pt, pb = _resolve_padding(h, stride, kernel, padding)
    wo, pl, pr = _resolve_padding(w, stride, kernel, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kernel * kernel * c)
    return cols, (ho, wo, pt, pl)


def col2im(gcols, x_shape, kernel, stride, geom):
    n, h, w, c = x_shape
    ho, wo, pt, pl = geom
    hp = max(h + pt, (ho - 1) * stride + kernel)
    wp = max(w + pl, (wo - 1) * stride + kernel)
    dxp = np.zeros((n, hp, wp, c), dtype=gcols.dtype)
    g = gcols.reshape(n, ho, wo, kernel, kernel, c)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, i:i + hspan:stride, j:j + wspan:stride, :] += g[:, :, :, i, j, :]
    return dxp[:, pt:pt + h, pl:pl + w, :]


def conv2d_forward_nhwc(x, w, b, stride=1, padding="same"):
    """Cross-correlation. ``w`` is (k, k, C_in, C_out). Returns (out, cols, geom)."""
    k = w.shape[0]
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with kernel {w.shape}")
    cols, geom = im2col(x, k, stride, padding)
    out = cols @ w.reshape(-1, w.shape[3])
    if b is not None:
        out += b
    return out.reshape(x.shape[0], geom[0], geom[1], w.shape[3]), cols, geom


def conv2d_backward_nhwc(x_shape, cols, geom, w, grad_out, stride=1, need_dx=True):
    k = w.shape[0]
    n, ho, wo, o = grad_out.shape
    if (ho, wo) != geom[:2] or o != w.shape[3]:
        raise ShapeMismatch(f"grad_out {grad_out.shape} does not match forward output")
    g2 = grad_out.reshape(n * ho * wo, o)
    dw = (cols.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dx = None
    if need_dx:
        dx = col2im(g2 @ w.reshape(-1, o).T, x_shape, k, stride, geom)
    return dx, dw, db


def conv2d_forward(x, weights, bias=None, stride=1, padding="same"):
    """Convolve an NCHW batch with (C_out, C_in, k, k) weights."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with weights {weights.shape}")
    out, _, _ = conv2d_forward_nhwc(
        x.transpose(0, 2, 3, 1), weights.transpose(2, 3, 1, 0), bias, stride, padding
    )
    return out.transpose(0, 3, 1, 2)


def conv2d_backward(x, weights, grad_out, stride=1, padding="same"):
    """Gradients (grad_x, grad_w, grad_b) of ``conv2d_forward`` in NCHW layout."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    grad_out = np.asarray(grad_out)
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with weights {weights.shape}")
    xt = x.transpose(0, 2, 3, 1)
    wt = weights.transpose(2, 3, 1, 0)
    cols, geom = im2col(xt, wt.shape[0], stride, padding)
    if grad_out.shape != (x.shape[0], weights.shape[0], geom[0], geom[1]):
        raise ShapeMismatch(f"grad_out {grad_out.shape} does not match forward output")
    dx, dw, db = conv2d_backward_nhwc(
        xt.shape, cols, geom, wt, grad_out.transpose(0, 2, 3, 1), stride
    )
    return dx.transpose(0, 3, 1, 2), dw.transpose(3, 2, 0, 1), db


# -- batch normalisation (channel axis last) ---------------------------------

def batchnorm_forward(x, gamma, beta, training, running_mean, running_var,
                      momentum=0.9, eps=1e-5):
    """Returns (out, cache, new_running_mean, new_running_var)."""
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise BatchTooSmall("batch normalisation needs batch >= 2 in training mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean = momentum * running_mean + (1.0 - momentum) * mean
        running_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std), running_mean, running_var


def batchnorm_backward(grad, cache, gamma, training=True):
    xhat, inv_std = cache
    axes = tuple(range(grad.ndim - 1))
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = grad * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    m = grad.size // grad.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def batchnorm(x, gamma, beta, mode="train", momentum=0.9, eps=1e-5,
              running_mean=None, running_var=None):
    """Batch normalisation of an NCHW tensor over (batch, H, W) per channel.

    Returns ``(out, running_mean, running_var)``; in ``"infer"`` mode the
    running statistics are used and returned unchanged.
    """
    x = np.asarray(x)
    c = x.shape[1]
    rm = np.zeros(c, dtype=x.dtype) if running_mean is None else running_mean
    rv = np.ones(c, dtype=x.dtype) if running_var is None else running_var
    out, _, rm, rv = batchnorm_forward(
        np.moveaxis(x, 1, -1), gamma, beta, mode == "train", rm, rv, momentum, eps
    )
    return np.moveaxis(out, -1, 1), rm, rv


# -- activations --------------------------------------------------------------

def elu(x):
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))


def elu_backward(x, out, grad):
    return grad * np.where(x > 0, 1.0, out + ELU_ALPHA).astype(grad.dtype, copy=False)


def sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(out, grad):
    return out * (grad - (grad * out).sum(axis=-1, keepdims=True))


def activation(x, kind):
    """Apply ``"elu"``, ``"sigmoid"`` or ``"softmax"`` (softmax over the last axis)."""
    kind = kind.lower()
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- pooling -------------------------------------------------------------------

def maxpool_forward(x, size=2):
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"input {x.shape} too small for {size}x{size} pooling")
    win = (x[:, :ho * size, :wo * size]
           .reshape(n, ho, size, wo, size, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, ho, wo, c, size * size))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(grad, idx, x_shape, size=2):
    n, h, w, c = x_shape
    ho, wo = grad.shape[1], grad.shape[2]
    win = np.zeros((n, ho, wo, c, size * size), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=grad.dtype)
    dx[:, :ho * size, :wo * size] = (win.reshape(n, ho, wo, c, size, size)
                                     .transpose(0, 1, 4, 2, 5, 3)
                                     .reshape(n, ho * size, wo * size, c))
    return dx
