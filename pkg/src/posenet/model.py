"""Full model assembly: embeddings, target shift, encoder/decoder wiring,
output projection, and greedy autoregressive generation."""

import math
from dataclasses import dataclass, field

import numpy as np

import posenet.tensor as T
from posenet.data import BOS_ID, EOS_ID, PAD_ID
from posenet.decoder import (
    DecoderConfig,
    DecoderLayerParams,
    DecoderParams,
    decode_step,
    decode_train,
)
from posenet.encoder import EncoderConfig, EncoderLayerParams, EncoderParams, encode
from posenet.layers import ConvBoxParams, FFNParams, add_timing, position_encoding
from posenet.tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    depth: int = 64
    max_length: int = 32
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.depth % 2 != 0:
            raise ValueError(f"depth must be even, got {self.depth}")
        if self.max_length < 2:
            raise ValueError(f"max_length must be >= 2, got {self.max_length}")


class Parameters:
    """Named, ordered collection of learnable tensors."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, array):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def total_count(self):
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    @classmethod
    def from_arrays(cls, named_arrays):
        p = cls()
        for name, arr in named_arrays:
            p.add(name, arr)
        return p


def _inventory(cfg):
    """(name, shape, kind) for every learnable tensor, in a fixed order
    derivable from the config alone. kind selects the initializer:
    'mat' is uniform scaled by 1/sqrt(fan_in), 'gain' is ones, 'bias' zeros."""
    d = cfg.depth
    v = cfg.vocab_size
    # embeddings are inputs rather than linear maps: fan-in 1, so token
    # vectors are unit-scale and are not swamped by the timing signal
    entries = [("embed.src", (v, d), "mat", 1)]
    if not cfg.tie_embeddings:
        entries.append(("embed.tgt", (v, d), "mat", 1))

    def ffn_entries(prefix, n_layers, hidden_mult):
        sizes = [d] + [hidden_mult * d] * (n_layers - 1) + [d]
        out = []
        for j in range(n_layers):
            out.append((f"{prefix}.w{j}", (sizes[j], sizes[j + 1]), "mat", sizes[j]))
            out.append((f"{prefix}.b{j}", (sizes[j + 1],), "bias", None))
        return out

    def box_entries(prefix, k):
        return [
            (f"{prefix}.depth", (k, d), "mat", k),
            (f"{prefix}.point", (d, d), "mat", d),
            (f"{prefix}.gain", (d,), "gain", None),
            (f"{prefix}.bias", (d,), "bias", None),
        ]

    def attn_entries(prefix, mode):
        out = []
        if mode == "projected":
            out.append((f"{prefix}.proj_s", (d, d), "mat", d))
            out.append((f"{prefix}.proj_t", (d, d), "mat", d))
        out.append((f"{prefix}.gain", (d,), "gain", None))
        out.append((f"{prefix}.bias", (d,), "bias", None))
        return out

    enc = cfg.encoder
    for i in range(enc.num_layers):
        for bx in range(len(enc.dilations)):
            entries.extend(box_entries(f"enc.{i}.box{bx}", enc.kernel))
        if enc.self_attention:
            entries.extend(attn_entries(f"enc.{i}.attn", enc.attention_mode))
        entries.extend(ffn_entries(f"enc.{i}.ffn", enc.ffn_layers, enc.ffn_hidden_mult))
        entries.append((f"enc.{i}.ffn.gain", (d,), "gain", None))
        entries.append((f"enc.{i}.ffn.bias", (d,), "bias", None))

    dec = cfg.decoder
    for i in range(dec.num_layers):
        if dec.self_attention:
            entries.extend(attn_entries(f"dec.{i}.self_attn", dec.attention_mode))
        entries.extend(attn_entries(f"dec.{i}.cross_attn", dec.attention_mode))
        for bx in range(2):
            entries.extend(box_entries(f"dec.{i}.box{bx}", dec.kernel))
        entries.extend(ffn_entries(f"dec.{i}.ffn", dec.ffn_layers, dec.ffn_hidden_mult))
        entries.append((f"dec.{i}.ffn.gain", (d,), "gain", None))
        entries.append((f"dec.{i}.ffn.bias", (d,), "bias", None))

    entries.append(("out.w", (d, v), "mat", d))
    entries.append(("out.b", (v,), "bias", None))
    return entries


def init_parameters(cfg, seed=None):
    """Fresh parameters, deterministic from the seed: matrices uniform in
    +-1/sqrt(fan_in), norm gains 1, biases 0."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = Parameters()
    for name, shape, kind, fan_in in _inventory(cfg):
        if kind == "mat":
            params.add(name, rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(fan_in))
        elif kind == "gain":
            params.add(name, np.ones(shape))
        else:
            params.add(name, np.zeros(shape))
    return params


@dataclass
class BoundModel:
    """Structured views over a flat Parameters inventory (shared tensors)."""

    cfg: ModelConfig
    pe: object
    src_embed: Tensor
    tgt_embed: Tensor
    enc: EncoderParams
    dec: DecoderParams
    out_w: Tensor
    out_b: Tensor


def bind(cfg, params):
    def maybe(name):
        return params[name] if name in params else None

    def ffn_view(prefix, n_layers):
        return FFNParams(
            [params[f"{prefix}.w{j}"] for j in range(n_layers)],
            [params[f"{prefix}.b{j}"] for j in range(n_layers)],
        )

    def box_view(prefix, dilation, padding_mode):
        return ConvBoxParams(
            depth_kernel=params[f"{prefix}.depth"],
            point_kernel=params[f"{prefix}.point"],
            gain=params[f"{prefix}.gain"],
            bias=params[f"{prefix}.bias"],
            dilation=dilation,
            padding_mode=padding_mode,
        )

    enc_cfg = cfg.encoder
    enc = EncoderParams()
    for i in range(enc_cfg.num_layers):
        enc.layers.append(
            EncoderLayerParams(
                boxes=[
                    box_view(f"enc.{i}.box{bx}", dil, "symmetric")
                    for bx, dil in enumerate(enc_cfg.dilations)
                ],
                ffn=ffn_view(f"enc.{i}.ffn", enc_cfg.ffn_layers),
                ffn_gain=params[f"enc.{i}.ffn.gain"],
                ffn_bias=params[f"enc.{i}.ffn.bias"],
                attn_gain=maybe(f"enc.{i}.attn.gain"),
                attn_bias=maybe(f"enc.{i}.attn.bias"),
                attn_proj_s=maybe(f"enc.{i}.attn.proj_s"),
                attn_proj_t=maybe(f"enc.{i}.attn.proj_t"),
            )
        )

    dec_cfg = cfg.decoder
    dec = DecoderParams()
    for i in range(dec_cfg.num_layers):
        dec.layers.append(
            DecoderLayerParams(
                boxes=[
                    box_view(f"dec.{i}.box{bx}", 1, "causal") for bx in range(2)
                ],
                ffn=ffn_view(f"dec.{i}.ffn", dec_cfg.ffn_layers),
                ffn_gain=params[f"dec.{i}.ffn.gain"],
                ffn_bias=params[f"dec.{i}.ffn.bias"],
                cross_gain=params[f"dec.{i}.cross_attn.gain"],
                cross_bias=params[f"dec.{i}.cross_attn.bias"],
                cross_proj_s=maybe(f"dec.{i}.cross_attn.proj_s"),
                cross_proj_t=maybe(f"dec.{i}.cross_attn.proj_t"),
                self_gain=maybe(f"dec.{i}.self_attn.gain"),
                self_bias=maybe(f"dec.{i}.self_attn.bias"),
                self_proj_s=maybe(f"dec.{i}.self_attn.proj_s"),
                self_proj_t=maybe(f"dec.{i}.self_attn.proj_t"),
            )
        )

    tgt_embed = params["embed.src"] if cfg.tie_embeddings else params["embed.tgt"]
    return BoundModel(
        cfg=cfg,
        pe=position_encoding(cfg.max_length, cfg.depth),
        src_embed=params["embed.src"],
        tgt_embed=tgt_embed,
        enc=enc,
        dec=dec,
        out_w=params["out.w"],
        out_b=params["out.b"],
    )


def _check_ids(ids, vocab_size, max_length, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise T.ShapeError(f"{what} ids must be [batch, length], got {ids.shape}")
    if ids.shape[1] > max_length:
        raise ValueError(
            f"{what} length {ids.shape[1]} exceeds max_length {max_length}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"{what} ids out of range [0, {vocab_size})")
    return ids.astype(np.int64)


def _embed_source(bound, src_ids):
    src_mask = src_ids != PAD_ID
    zero_pads = src_mask[:, :, None].astype(np.float64)
    emb = T.mul(T.embedding_lookup(src_ids, bound.src_embed), zero_pads)
    e = T.mul(add_timing(emb, bound.pe), zero_pads)
    return e, src_mask


def shift_targets(tgt_ids):
    """Decoder input: targets shifted right behind BOS."""
    b = tgt_ids.shape[0]
    bos = np.full((b, 1), BOS_ID, dtype=np.int64)
    return np.concatenate([bos, tgt_ids[:, :-1]], axis=1)


def forward_train(src_ids, tgt_ids, cfg, params):
    """Teacher-forced logits [b, m, V]; logits[:, i] predicts tgt_ids[:, i]."""
    bound = params if isinstance(params, BoundModel) else bind(cfg, params)
    src_ids = _check_ids(src_ids, cfg.vocab_size, cfg.max_length, "source")
    tgt_ids = _check_ids(tgt_ids, cfg.vocab_size, cfg.max_length, "target")
    e, src_mask = _embed_source(bound, src_ids)
    h = encode(e, src_mask, cfg.encoder, bound.enc, bound.pe)
    dec_in = shift_targets(tgt_ids)
    dec_mask = dec_in != PAD_ID
    t_emb = T.embedding_lookup(dec_in, bound.tgt_embed)
    out = decode_train(
        t_emb, h, src_mask, dec_mask, cfg.decoder, bound.dec, bound.pe
    )
    return T.add(T.matmul(out, bound.out_w), bound.out_b)


def greedy_generate(src_ids, cfg, params, max_len=None):
    """Greedy decoding: repeatedly append the argmax token (ties break
    toward the lowest id), stopping at EOS or after max_len tokens.

    Returns one id array per row (without BOS, including a terminating
    EOS when produced); a 1-d input yields a single array.
    """
    bound = params if isinstance(params, BoundModel) else bind(cfg, params)
    squeeze = np.asarray(src_ids).ndim == 1
    if squeeze:
        src_ids = np.asarray(src_ids)[None, :]
    src_ids = _check_ids(src_ids, cfg.vocab_size, cfg.max_length, "source")
    if max_len is None:
        max_len = cfg.max_length - 1
    if max_len > cfg.max_length:
        raise ValueError(f"max_len {max_len} exceeds max_length {cfg.max_length}")
    e, src_mask = _embed_source(bound, src_ids)
    h = encode(e, src_mask, cfg.encoder, bound.enc, bound.pe)

    b = src_ids.shape[0]
    prefix = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outputs = [[] for _ in range(b)]
    while prefix.shape[1] <= min(max_len, cfg.max_length - 1) and not done.all():
        t_emb = T.embedding_lookup(prefix, bound.tgt_embed)
        rep = decode_step(t_emb, h, src_mask, cfg.decoder, bound.dec, bound.pe)
        logits = T.add(T.matmul(rep, bound.out_w), bound.out_b).data[:, 0, :]
        next_ids = np.argmax(logits, axis=-1)
        next_ids[done] = PAD_ID
        for i in range(b):
            if not done[i]:
                outputs[i].append(int(next_ids[i]))
                if next_ids[i] == EOS_ID:
                    done[i] = True
        prefix = np.concatenate([prefix, next_ids[:, None]], axis=1)
    result = [np.array(o, dtype=np.int64) for o in outputs]
    return result[0] if squeeze else result
