"""Finite-difference verification of analytic gradients.

Central differences at step h are compared elementwise against the
gradients produced by the reverse sweep; the report carries the maximum
relative error over all checked elements.
"""

from dataclasses import dataclass, field

import numpy as np

import posenet.tensor as T
from posenet.tensor import Graph


@dataclass
class GradCheckFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def summary(self):
        status = "pass" if self.passed else "FAIL"
        lines = [
            f"{status}: max relative error {self.max_rel_error:.3e} "
            f"over {self.checked} elements (tol {self.tol:.1e})"
        ]
        for f in self.failures[:10]:
            lines.append(
                f"  {f.param}{list(f.index)}: analytic {f.analytic:.6e} "
                f"vs numeric {f.numeric:.6e} (rel {f.rel_error:.3e})"
            )
        if len(self.failures) > 10:
            lines.append(f"  ... {len(self.failures) - 10} more")
        return "\n".join(lines)


def finite_diff_check(f, params, h=1e-4, tol=1e-3, denom_floor=1e-3):
    """Check analytic gradients of ``f`` against central differences.

    f: deterministic callable taking ``params`` (a name -> Tensor mapping)
    and returning a scalar tensor. Every element of every tensor in
    ``params`` is perturbed by +-h. The relative error denominator is
    floored at ``denom_floor`` so near-zero gradients are compared at an
    effective absolute tolerance of tol * denom_floor.
    """
    items = list(params.items())
    for _, t in items:
        t.grad = None
    with Graph() as g:
        loss = f(params)
        g.backward(loss)
    analytic = {}
    for name, t in items:
        if t.grad is None:
            analytic[name] = np.zeros(t.shape)
        else:
            analytic[name] = t.grad.copy()
        t.grad = None

    max_rel = 0.0
    checked = 0
    failures = []
    for name, t in items:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(params).item()
            flat[i] = orig - h
            f_minus = f(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel >= tol:
                idx = np.unravel_index(i, t.shape) if t.ndim else ()
                failures.append(GradCheckFailure(name, tuple(idx), a, numeric, rel))
    return GradCheckReport(max_rel_error=max_rel, tol=tol, checked=checked,
                           failures=failures)


def standard_suite(h=1e-4, tol=1e-3, seed=2024):
    """Gradient-check every layer type plus a 1+1-layer end-to-end model.

    Returns a list of (name, GradCheckReport); intended for the CLI
    ``gradcheck`` command and the acceptance suite.
    """
    from posenet.decoder import DecoderConfig, decode_train
    from posenet.encoder import EncoderConfig, encode
    from posenet.layers import (
        AttentionConfig,
        ConvBoxParams,
        FFNParams,
        attention,
        conv_box,
        ffn_apply,
        multi_head_attention,
        residual_norm,
    )
    from posenet.model import ModelConfig, bind, forward_train, init_parameters
    from posenet.training import cross_entropy_loss

    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, params):
        results.append((name, finite_diff_check(f, params, h=h, tol=tol)))

    def tt(shape, scale=1.0):
        return T.tensor(rng.normal(size=shape, scale=scale), requires_grad=True)

    # fixed mixing weights so every output element reaches the scalar loss
    mix = rng.normal(size=(2, 4, 3))
    mix2 = rng.normal(size=(2, 4, 4))
    mix3 = rng.normal(size=(1, 6, 3))
    mix4 = rng.normal(size=(1, 6, 3))
    mix5 = rng.normal(size=(1, 3, 3))
    mix6 = rng.normal(size=(1, 4, 4))
    check(
        "matmul",
        lambda p: T.sum_all(T.mul(T.matmul(p["a"], p["b"]), mix)),
        {"a": tt((2, 4, 5)), "b": tt((2, 5, 3))},
    )
    mask = np.tril(np.ones((4, 4), dtype=bool))
    check(
        "softmax_masked",
        lambda p: T.sum_all(T.mul(T.softmax(p["x"], mask=mask), mix2)),
        {"x": tt((2, 4, 4))},
    )
    check(
        "conv1d",
        lambda p: T.sum_all(
            T.mul(T.conv1d(p["x"], p["k"], 2, "symmetric"), mix3)
        ),
        {"x": tt((1, 6, 3)), "k": tt((3, 3, 3))},
    )
    check(
        "depthwise_sep_conv",
        lambda p: T.sum_all(
            T.mul(T.depthwise_sep_conv(p["x"], p["taps"], p["point"], 1, "causal"), mix4)
        ),
        {"x": tt((1, 6, 3)), "taps": tt((3, 3)), "point": tt((3, 3))},
    )
    check(
        "layer_norm",
        lambda p: T.sum_all(T.mul(T.layer_norm(p["x"], p["g"], p["b"]), mix4)),
        {"x": tt((1, 6, 3)), "g": tt(3), "b": tt(3)},
    )
    check(
        "embedding_lookup",
        lambda p: T.sum_all(
            T.mul(T.embedding_lookup(np.array([[0, 2, 1]]), p["table"]), mix5)
        ),
        {"table": tt((4, 3))},
    )

    # layer compositions
    check(
        "attention",
        lambda p: T.sum_all(T.mul(attention(p["s"], p["t"], mask), mix6)),
        {"s": tt((1, 4, 4)), "t": tt((1, 4, 4))},
    )
    attn_cfg = AttentionConfig(heads=2, mode="projected")
    check(
        "multi_head_attention",
        lambda p: T.sum_all(
            T.mul(
                multi_head_attention(p["s"], p["t"], mask, attn_cfg, p["ps"], p["pt"]),
                mix6,
            )
        ),
        {"s": tt((1, 4, 4)), "t": tt((1, 4, 4)), "ps": tt((4, 4)), "pt": tt((4, 4))},
    )
    box = ConvBoxParams(
        depth_kernel=tt((3, 4), scale=0.5),
        point_kernel=tt((4, 4), scale=0.5),
        gain=T.tensor(np.ones(4), requires_grad=True),
        bias=T.tensor(np.zeros(4), requires_grad=True),
        dilation=2,
        padding_mode="symmetric",
    )
    check(
        "conv_box",
        lambda p: T.sum_all(T.mul(conv_box(p["x"], box), mix6)),
        {
            "x": tt((1, 4, 4)),
            "depth": box.depth_kernel,
            "point": box.point_kernel,
            "gain": box.gain,
            "bias": box.bias,
        },
    )
    ffn = FFNParams([tt((4, 8)), tt((8, 4))], [tt(8), tt(4)])
    gain, bias = tt(4), tt(4)
    check(
        "ffn_residual_norm",
        lambda p: T.sum_all(
            T.mul(residual_norm(p["x"], lambda v: ffn_apply(v, ffn), gain, bias), mix6)
        ),
        {
            "x": tt((1, 4, 4)),
            "w0": ffn.weights[0],
            "w1": ffn.weights[1],
            "b0": ffn.biases[0],
            "b1": ffn.biases[1],
            "gain": gain,
            "bias": bias,
        },
    )
    check(
        "softmax_cross_entropy",
        lambda p: cross_entropy_loss(
            p["logits"], np.array([[1, 3, 0, 2]]), np.ones((1, 4), dtype=bool), 0.1
        ),
        {"logits": tt((1, 4, 4))},
    )

    # stacks and the end-to-end model (1+1 layers, d=4, n=m=4)
    cfg = ModelConfig(
        vocab_size=6,
        depth=4,
        max_length=8,
        encoder=EncoderConfig(num_layers=1, heads=2),
        decoder=DecoderConfig(num_layers=1, heads=2),
        seed=int(rng.integers(2**31)),
    )
    params = init_parameters(cfg)
    bound = bind(cfg, params)
    pad = np.ones((1, 4), dtype=bool)
    enc_in = tt((1, 4, 4))
    enc_named = {n: p for n, p in params.items() if n.startswith("enc.")}
    enc_named["input"] = enc_in
    check(
        "encoder_stack",
        lambda p: T.sum_all(
            T.mul(encode(enc_in, pad, cfg.encoder, bound.enc, bound.pe), mix6)
        ),
        enc_named,
    )
    dec_in = tt((1, 4, 4))
    dec_h = tt((1, 4, 4))
    dec_named = {n: p for n, p in params.items() if n.startswith("dec.")}
    dec_named["input"] = dec_in
    dec_named["h"] = dec_h
    check(
        "decoder_stack",
        lambda p: T.sum_all(
            T.mul(
                decode_train(dec_in, dec_h, pad, pad, cfg.decoder, bound.dec, bound.pe),
                mix6,
            )
        ),
        dec_named,
    )
    src = np.array([[4, 5, 4, 1]])
    tgt = np.array([[5, 4, 5, 1]])
    check(
        "model_end_to_end",
        lambda p: cross_entropy_loss(
            forward_train(src, tgt, cfg, p), tgt, pad, 0.0
        ),
        dict(params.items()),
    )
    return results
