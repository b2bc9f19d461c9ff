"""Autoregressive decoder stack: masked self-attention, cross-attention
over the encoded inputs (placed before the convolution boxes), two causal
convolution boxes, and a closing feed-forward net per layer.

The decoder side of the position-sensitivity asymmetry: the timing signal
is applied at most once (at the stack bottom), every convolution box is
causal, and dilation is fixed at 1.
"""

from dataclasses import dataclass, field

import numpy as np

import posenet.tensor as T
from posenet.layers import (
    AttentionConfig,
    add_timing,
    conv_box,
    ffn_apply,
    multi_head_attention,
    residual_norm,
)
from posenet.tensor import ShapeError


@dataclass
class DecoderConfig:
    num_layers: int = 5
    kernel: int = 3
    self_attention: bool = True
    apply_pe_once: bool = True
    heads: int = 4
    attention_mode: str = "plain"
    ffn_hidden_mult: int = 4
    ffn_layers: int = 2

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.kernel < 1 or self.ffn_layers < 1:
            raise ValueError("kernel and ffn_layers must be >= 1")

    def attention_config(self):
        return AttentionConfig(heads=self.heads, mode=self.attention_mode)


@dataclass
class DecoderLayerParams:
    boxes: list  # two ConvBoxParams, causal, dilation 1
    ffn: object
    ffn_gain: object
    ffn_bias: object
    cross_gain: object = None
    cross_bias: object = None
    cross_proj_s: object = None
    cross_proj_t: object = None
    self_gain: object = None
    self_bias: object = None
    self_proj_s: object = None
    self_proj_t: object = None


@dataclass
class DecoderParams:
    layers: list = field(default_factory=list)


def _check_causal(params):
    for lp in params.layers:
        for box in lp.boxes:
            if box.padding_mode != "causal" or box.dilation != 1:
                raise ValueError(
                    "decoder convolution boxes must be causal with dilation 1"
                )


def decode_train(t_emb, h, pad_mask_src, pad_mask_tgt, cfg, params, pe):
    """Teacher-forced pass over shifted target embeddings t_emb [b, m, d].

    Output position i depends only on target positions <= i (causal masks
    and causal convolutions) and on all unpadded encoder positions of h.
    """
    if t_emb.shape[-1] != h.shape[-1]:
        raise ShapeError(
            f"depth mismatch: decoder state {t_emb.shape} vs encoder output {h.shape}"
        )
    _check_causal(params)
    m = t_emb.shape[1]
    causal = np.tril(np.ones((m, m), dtype=bool))
    self_mask = causal[None, :, :] & pad_mask_tgt[:, None, :]
    cross_mask = pad_mask_src[:, None, :]
    attn_cfg = cfg.attention_config()
    with T.scope("decoder"):
        x = add_timing(t_emb, pe) if cfg.apply_pe_once else t_emb
        for lp in params.layers:
            if cfg.self_attention:
                x = residual_norm(
                    x,
                    lambda v: multi_head_attention(
                        v, v, self_mask, attn_cfg, lp.self_proj_s, lp.self_proj_t
                    ),
                    lp.self_gain,
                    lp.self_bias,
                )
            x = residual_norm(
                x,
                lambda v: multi_head_attention(
                    h, v, cross_mask, attn_cfg, lp.cross_proj_s, lp.cross_proj_t
                ),
                lp.cross_gain,
                lp.cross_bias,
            )
            for box in lp.boxes:
                x = conv_box(x, box)
            x = residual_norm(
                x, lambda v: ffn_apply(v, lp.ffn), lp.ffn_gain, lp.ffn_bias
            )
    return x


def decode_step(prefix_emb, h, pad_mask_src, cfg, params, pe):
    """Representation of the final prefix position, for autoregressive
    generation. Re-runs the prefix through decode_train; by causality it
    equals the last column of the full pass."""
    if prefix_emb.shape[1] < 1:
        raise ValueError("decode_step needs a non-empty prefix")
    pad_mask_tgt = np.ones(prefix_emb.shape[:2], dtype=bool)
    full = decode_train(prefix_emb, h, pad_mask_src, pad_mask_tgt, cfg, params, pe)
    return T.Tensor(full.data[:, -1:, :].copy())
