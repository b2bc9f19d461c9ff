"""Encoder stack: repeated timing signal, dilated symmetric convolution
boxes, optional self-attention, and a closing feed-forward net per layer.

The timing signal is re-applied at the start of every layer (the encoder
side of the position-sensitivity asymmetry), and padded positions are
re-zeroed after every sub-layer so pad slots can never leak into real
positions through convolution windows or normalization.
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


@dataclass
class EncoderConfig:
    num_layers: int = 6
    kernel: int = 3
    dilations: tuple = (1, 2)  # one convolution box per entry, in order
    self_attention: bool = True
    pe_per_layer: bool = True
    heads: int = 4
    attention_mode: str = "plain"
    ffn_hidden_mult: int = 4
    ffn_layers: int = 2

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.num_layers < 1:
            raise ValueError("encoder needs at least one layer")
        if any(d < 1 for d in self.dilations) or not self.dilations:
            raise ValueError(f"bad dilation schedule {self.dilations}")
        if self.kernel < 1 or self.ffn_layers < 1:
            raise ValueError("kernel and ffn_layers must be >= 1")

    def attention_config(self):
        return AttentionConfig(heads=self.heads, mode=self.attention_mode)


@dataclass
class EncoderLayerParams:
    boxes: list  # ConvBoxParams, one per dilation, symmetric padding
    ffn: object  # FFNParams
    ffn_gain: object
    ffn_bias: object
    attn_gain: object = None
    attn_bias: object = None
    attn_proj_s: object = None
    attn_proj_t: object = None


@dataclass
class EncoderParams:
    layers: list = field(default_factory=list)


def encode(e, pad_mask, cfg, params, pe):
    """Run the encoder stack over embedded inputs e [b, n, d].

    pad_mask [b, n] marks real tokens; masked positions are zeroed after
    every sub-layer and excluded as attention keys.
    """
    zero_pads = pad_mask[:, :, None].astype(np.float64)
    key_mask = pad_mask[:, None, :]
    attn_cfg = cfg.attention_config()
    x = T.mul(e, zero_pads)
    with T.scope("encoder"):
        for lp in params.layers:
            if cfg.pe_per_layer:
                x = T.mul(add_timing(x, pe), zero_pads)
            for box in lp.boxes:
                x = T.mul(conv_box(x, box), zero_pads)
            if cfg.self_attention:
                x = T.mul(
                    residual_norm(
                        x,
                        lambda v: multi_head_attention(
                            v, v, key_mask, attn_cfg, lp.attn_proj_s, lp.attn_proj_t
                        ),
                        lp.attn_gain,
                        lp.attn_bias,
                    ),
                    zero_pads,
                )
            x = T.mul(
                residual_norm(
                    x, lambda v: ffn_apply(v, lp.ffn), lp.ffn_gain, lp.ffn_bias
                ),
                zero_pads,
            )
    return x


def receptive_field(cfg, layer_index):
    """Half-width of the input window influencing one position after
    ``layer_index`` layers, counting convolution boxes only (attention,
    when enabled, is global)."""
    if not 0 <= layer_index <= cfg.num_layers:
        raise ValueError(
            f"layer index {layer_index} outside [0, {cfg.num_layers}]"
        )
    half = -(-(cfg.kernel - 1) // 2)  # ceil((k-1)/2)
    per_layer = sum(half * d for d in cfg.dilations)
    return per_layer * layer_index
