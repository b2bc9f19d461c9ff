"""Pure-numpy implementations of the hot kernels.

This is the fallback backend; ``posenet.kernels._ckernels`` is the compiled
twin with identical signatures. Both operate on C-contiguous float64 arrays
and are selected at import time by ``posenet.kernels``.
"""

import numpy as np


def dw_conv1d_forward(x, taps, dilation, pad_left):
    """Depthwise 1-d convolution.

    x: [b, n, d], taps: [k, d]. Output position t accumulates
    x[t + j*dilation - pad_left] * taps[j] over taps j, with zero padding
    outside [0, n).
    """
    b, n, d = x.shape
    k = taps.shape[0]
    y = np.zeros((b, n, d), dtype=np.float64)
    for j in range(k):
        off = j * dilation - pad_left
        t0 = max(0, -off)
        t1 = min(n, n - off)
        if t0 >= t1:
            continue
        y[:, t0:t1, :] += x[:, t0 + off : t1 + off, :] * taps[j]
    return y


def dw_conv1d_backward(x, taps, dy, dilation, pad_left):
    b, n, d = x.shape
    k = taps.shape[0]
    dx = np.zeros_like(x)
    dtaps = np.zeros_like(taps)
    for j in range(k):
        off = j * dilation - pad_left
        t0 = max(0, -off)
        t1 = min(n, n - off)
        if t0 >= t1:
            continue
        dy_slice = dy[:, t0:t1, :]
        dx[:, t0 + off : t1 + off, :] += dy_slice * taps[j]
        dtaps[j] += (x[:, t0 + off : t1 + off, :] * dy_slice).sum(axis=(0, 1))
    return dx, dtaps


def scatter_add_rows(out, ids, rows):
    """out[ids[i]] += rows[i] for every i, in index order (in place)."""
    np.add.at(out, ids, rows)


def masked_softmax(logits, mask):
    """Row-wise stable softmax over the last axis of a 2-d array.

    mask (uint8, same shape) marks allowed entries; disallowed entries get
    probability exactly 0. Callers must ensure every row has an allowed entry.
    """
    if mask is None:
        shifted = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(shifted)
    else:
        neg = np.where(mask.astype(bool), logits, -np.inf)
        w = np.exp(neg - neg.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w


def softmax_backward(w, dy):
    inner = (w * dy).sum(axis=1, keepdims=True)
    return w * (dy - inner)


def layer_norm_forward(x, gain, bias, eps):
    """Normalize each row of x to zero mean / unit variance (population),
    then scale and shift. Returns (y, xhat, rstd) with xhat and rstd saved
    for the backward pass."""
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = xhat * gain + bias
    return y, xhat, rstd[:, 0]


def layer_norm_backward(xhat, rstd, gain, dy):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias
