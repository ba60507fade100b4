"""Minimal float64 CNN primitives with hand-written backward passes.

Tensors are NHWC. Conv kernels are stored ``(out, in, 3, 3)``. Every
``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    n, h, wd, c = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # columns ordered (ki, kj, c) so that col2im slices stay contiguous in c
    win = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = win.reshape(n * h * wd, 9 * c)
    wk = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wk.T
    out += b
    return out.reshape(n, h, wd, o), (x.shape, cols, wk, w.shape)


def conv3x3_backward(dout, cache, need_dx=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    x_shape, cols, wk, w_shape = cache
    n, h, wd, c = x_shape
    o = wk.shape[0]
    dflat = dout.reshape(-1, o)
    dw = (dflat.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = (dflat @ wk).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], np.ascontiguousarray(dw), db


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, x):
    return dout * (x > 0.0)


def maxpool2_forward(x, need_grad=True):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Reduces rows first, then columns. On ties the top (then left) element wins
    the gradient. With ``need_grad=False`` the cache is None.
    """
    n, h, wd, c = x.shape
    h2, w2 = h // 2, wd // 2
    top, bottom = x[:, 0:2 * h2:2, :2 * w2], x[:, 1:2 * h2:2, :2 * w2]
    if not need_grad:
        a = np.maximum(top, bottom)
        return np.maximum(a[:, :, 0::2], a[:, :, 1::2]), None
    rowsel = bottom > top
    a = np.where(rowsel, bottom, top)
    left, right = a[:, :, 0::2], a[:, :, 1::2]
    colsel = right > left
    return np.where(colsel, right, left), (x.shape, rowsel, colsel)


def maxpool2_backward(dout, cache):
    x_shape, rowsel, colsel = cache
    h2, w2 = dout.shape[1], dout.shape[2]
    da = np.empty(rowsel.shape)
    da[:, :, 0::2] = np.where(colsel, 0.0, dout)
    da[:, :, 1::2] = np.where(colsel, dout, 0.0)
    dx = np.zeros(x_shape)
    dx[:, 0:2 * h2:2, :2 * w2] = np.where(rowsel, 0.0, da)
    dx[:, 1:2 * h2:2, :2 * w2] = np.where(rowsel, da, 0.0)
    return dx


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy on raw logits; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = logits.size
    # log(1 + exp(-|z|)) form is stable for large |z|
    per = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    loss = float(per.sum() / n)
    grad = (sigmoid(logits) - labels) / n
    return loss, grad


def smooth_l1(diff, beta=1.0):
    """Summed smooth-L1 of ``diff``; returns ``(loss, dloss/ddiff)``."""
    ad = np.abs(diff)
    quad = ad < beta
    loss = np.where(quad, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    grad = np.where(quad, diff / beta, np.sign(diff))
    return float(loss.sum()), grad


def he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
