"""Position-sensitivity building blocks.

Timing signal (sinusoidal position encoding), position-wise feed-forward
nets, inner-product attention (plain and multi-head), and the convolution
box: relu -> depthwise-separable convolution -> residual add -> layer norm.
"""

import math
from dataclasses import dataclass

import numpy as np

import posenet.tensor as T
from posenet.tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# Position encoding
# ---------------------------------------------------------------------------


@dataclass
class PositionEncoding:
    max_length: int
    depth: int
    table: np.ndarray  # [max_length, depth], values in [-1, 1]


def position_encoding(max_length, depth):
    """Sinusoidal timing table: row pos holds sin(pos * f_i), cos(pos * f_i)
    pairs with frequencies f_i = 10000^(-2i/depth)."""
    if depth % 2 != 0:
        raise ValueError(f"position encoding depth must be even, got {depth}")
    pos = np.arange(max_length, dtype=np.float64)[:, None]
    pair = np.arange(depth // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * pair / depth)
    table = np.empty((max_length, depth), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return PositionEncoding(max_length=max_length, depth=depth, table=table)


def add_timing(x, pe):
    """Add the timing signal position-wise: e[t] = x[t] + table[t]."""
    n = x.shape[-2]
    if n > pe.max_length:
        raise ValueError(
            f"sequence length {n} exceeds position table length {pe.max_length}"
        )
    if x.shape[-1] != pe.depth:
        raise ShapeError(f"depth mismatch: x {x.shape} vs table depth {pe.depth}")
    T.event("add_timing", length=n)
    return T.add(x, pe.table[:n])


# ---------------------------------------------------------------------------
# Position-wise feed-forward
# ---------------------------------------------------------------------------


@dataclass
class FFNParams:
    """Chain of linear maps with relu between them (not after the last):
    the first layer is x W1 + b1, layer j >= 2 is max(0, prev) Wj + bj."""

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("ffn needs equally many weights and biases, at least one")
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"ffn bias {j} shape {b.shape} vs weight {w.shape}")
            if j > 0 and w.shape[0] != self.weights[j - 1].shape[1]:
                raise ShapeError(
                    f"ffn layer {j} expects {self.weights[j - 1].shape[1]} inputs, "
                    f"weight is {w.shape}"
                )


def ffn_apply(x, params):
    """Apply the feed-forward chain identically at every position."""
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ShapeError(
            f"ffn expects depth {params.weights[0].shape[0]}, input is {x.shape}"
        )
    h = T.add(T.matmul(x, params.weights[0]), params.biases[0])
    for w, b in zip(params.weights[1:], params.biases[1:]):
        h = T.add(T.matmul(T.relu(h), w), b)
    return h


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionConfig:
    heads: int = 1
    mode: str = "plain"  # "plain" carries no learned parameters

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.mode not in ("plain", "projected"):
            raise ValueError(f"unknown attention mode {self.mode!r}")


def attention(s, t, mask=None):
    """Inner-product attention of queries t over keys/values s.

    Logits are t . s^T scaled by 1/sqrt(depth); masked entries are excluded
    from the softmax (probability exactly 0). Output rows are convex
    combinations of s rows.
    """
    if s.shape[-1] != t.shape[-1]:
        raise ShapeError(f"attention depth mismatch: S {s.shape} vs T {t.shape}")
    depth = s.shape[-1]
    logits = T.scale(T.matmul(t, T.transpose_last_two(s)), 1.0 / math.sqrt(depth))
    weights = T.softmax(logits, mask=mask)
    return T.matmul(weights, s)


def _split_heads(x, heads):
    b, n, d = x.shape
    return T.permute(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(s, t, mask, cfg, proj_s=None, proj_t=None):
    """Attention over `cfg.heads` contiguous channel segments of depth d/h,
    concatenated back along the channel axis.

    In projected mode, learned d x d maps are applied to s (keys/values)
    and t (queries) first.
    """
    d = s.shape[-1]
    if d % cfg.heads != 0:
        raise ShapeError(f"depth {d} not divisible by {cfg.heads} heads")
    if cfg.mode == "projected":
        if proj_s is None or proj_t is None:
            raise ValueError("projected attention needs proj_s and proj_t")
        s = T.matmul(s, proj_s)
        t = T.matmul(t, proj_t)
    if cfg.heads == 1:
        return attention(s, t, mask)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            mask = mask[:, None]  # add head axis
    out = attention(_split_heads(s, cfg.heads), _split_heads(t, cfg.heads), mask)
    return _merge_heads(out)


# ---------------------------------------------------------------------------
# Convolution box and residual norm
# ---------------------------------------------------------------------------


@dataclass
class ConvBoxParams:
    depth_kernel: Tensor  # [k, d]
    point_kernel: Tensor  # [d, d]
    gain: Tensor  # [d]
    bias: Tensor  # [d]
    dilation: int = 1
    padding_mode: str = "symmetric"

    def __post_init__(self):
        if self.depth_kernel.shape[0] < 1 or self.dilation < 1:
            raise ValueError("conv box needs k >= 1 and dilation >= 1")
        if self.padding_mode not in T.PADDING_MODES:
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")


def conv_box(x, params, eps=1e-6):
    """norm(x + sepconv(relu(x))) with the box's dilation and padding mode."""
    f = T.depthwise_sep_conv(
        T.relu(x),
        params.depth_kernel,
        params.point_kernel,
        dilation=params.dilation,
        padding_mode=params.padding_mode,
    )
    return T.layer_norm(T.add(x, f), params.gain, params.bias, eps=eps)


def residual_norm(x, f, gain, bias, eps=1e-6):
    """norm(x + f(x)) for a shape-preserving sub-layer f."""
    y = f(x)
    if y.shape != x.shape:
        raise ShapeError(f"residual sub-layer changed shape {x.shape} -> {y.shape}")
    return T.layer_norm(T.add(x, y), gain, bias, eps=eps)
