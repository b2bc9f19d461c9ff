import numpy as np
import pytest

import posenet.tensor as T
from posenet.encoder import EncoderConfig, encode, receptive_field
from posenet.gradcheck import finite_diff_check
from posenet.layers import add_timing
from posenet.tensor import layer_norm
from posenet.model import ModelConfig, bind, init_parameters
from posenet.tensor import Graph, sum_all, tensor


def small_model(d=4, n_layers=1, max_length=12, **enc_kwargs):
    cfg = ModelConfig(
        vocab_size=8,
        depth=d,
        max_length=max_length,
        encoder=EncoderConfig(num_layers=n_layers, **enc_kwargs),
    )
    params = init_parameters(cfg, seed=5)
    return cfg, params, bind(cfg, params)


def run_encoder(bound, cfg, e, pad_mask):
    return encode(tensor(e), pad_mask, cfg.encoder, bound.enc, bound.pe)


class TestEncode:
    def test_output_shape(self, rng):
        cfg, _, bound = small_model(d=4, n_layers=2)
        e = rng.normal(size=(3, 5, 4))
        mask = np.ones((3, 5), dtype=bool)
        out = run_encoder(bound, cfg, e, mask)
        assert out.shape == (3, 5, 4)

    def test_zeroed_layer_reduces_to_norm_chain(self, rng):
        cfg, params, bound = small_model(d=4, n_layers=1, self_attention=False)
        for name, p in params.items():
            if ".depth" in name or ".point" in name or "ffn.w" in name or "ffn.b0" in name or "ffn.b1" in name:
                p.data[:] = 0.0
        e = rng.normal(size=(1, 4, 4))
        mask = np.ones((1, 4), dtype=bool)
        out = run_encoder(bound, cfg, e, mask)

        lp = bound.enc.layers[0]
        x = add_timing(tensor(e), bound.pe)
        x = layer_norm(x, lp.boxes[0].gain, lp.boxes[0].bias)
        x = layer_norm(x, lp.boxes[1].gain, lp.boxes[1].bias)
        x = layer_norm(x, lp.ffn_gain, lp.ffn_bias)
        np.testing.assert_array_equal(out.data, x.data)

    def test_padding_does_not_leak_into_real_positions(self, rng):
        cfg, _, bound = small_model(d=4, n_layers=2)
        e = rng.normal(size=(1, 4, 4))
        mask = np.ones((1, 4), dtype=bool)
        h = run_encoder(bound, cfg, e, mask)

        padded = np.zeros((1, 6, 4))
        padded[:, :4] = e
        mask_p = np.array([[True] * 4 + [False] * 2])
        h_p = run_encoder(bound, cfg, padded, mask_p)
        np.testing.assert_allclose(h_p.data[:, :4], h.data, atol=1e-9)
        assert (h_p.data[:, 4:] == 0.0).all()

    def test_pad_slot_embedding_cannot_influence_output(self, rng):
        cfg, _, bound = small_model(d=4, n_layers=2)
        e = np.zeros((1, 6, 4))
        e[:, :4] = rng.normal(size=(1, 4, 4))
        mask = np.array([[True] * 4 + [False] * 2])
        base = run_encoder(bound, cfg, e, mask).data
        poked = e.copy()
        poked[:, 4:] = rng.normal(size=(1, 2, 4))
        out = run_encoder(bound, cfg, poked, mask).data
        np.testing.assert_array_equal(out[:, :4], base[:, :4])

    def test_trace_has_one_add_timing_per_layer(self, rng):
        cfg, _, bound = small_model(d=4, n_layers=3)
        e = rng.normal(size=(1, 4, 4))
        mask = np.ones((1, 4), dtype=bool)
        with Graph() as g:
            run_encoder(bound, cfg, e, mask)
        assert g.count("add_timing", scope="encoder") == cfg.encoder.num_layers

    def test_locality_without_attention(self, rng):
        cfg, _, bound = small_model(
            d=4, n_layers=2, max_length=16,
            self_attention=False, kernel=3, dilations=(1, 2),
        )
        rf = receptive_field(cfg.encoder, 2)
        n = 16
        e = rng.normal(size=(1, n, 4))
        mask = np.ones((1, n), dtype=bool)
        base = run_encoder(bound, cfg, e, mask).data
        for j in (0, 7, 15):
            poked = e.copy()
            poked[0, j] += 1.0
            out = run_encoder(bound, cfg, poked, mask).data
            changed = np.where(np.any(out[0] != base[0], axis=-1))[0]
            assert changed.size > 0
            assert all(abs(int(t) - j) <= rf for t in changed)

    def test_sequence_longer_than_table_errors(self, rng):
        cfg, _, bound = small_model(d=4)
        e = rng.normal(size=(1, 13, 4))
        mask = np.ones((1, 13), dtype=bool)
        with pytest.raises(ValueError, match="exceeds"):
            run_encoder(bound, cfg, e, mask)

    def test_full_stack_gradient_check(self, rng):
        cfg, params, bound = small_model(d=4, n_layers=2, heads=2)
        e = tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
        mask = np.ones((1, 5), dtype=bool)
        weights = rng.normal(size=(1, 5, 4))
        enc_params = {
            name: p for name, p in params.items() if name.startswith("enc.")
        }
        enc_params["input"] = e

        def f(_):
            out = encode(e, mask, cfg.encoder, bound.enc, bound.pe)
            return sum_all(T.mul(out, weights))

        report = finite_diff_check(f, enc_params, h=1e-4, tol=1e-3)
        assert report.passed, report.summary()


class TestReceptiveField:
    def test_layer_one_example(self):
        cfg = EncoderConfig(num_layers=6, kernel=3, dilations=(1, 2))
        assert receptive_field(cfg, 1) == 3

    def test_kernel_one_is_zero(self):
        cfg = EncoderConfig(num_layers=4, kernel=1, dilations=(1, 2))
        for layer in range(5):
            assert receptive_field(cfg, layer) == 0

    def test_monotone_growth(self):
        cfg = EncoderConfig(num_layers=6, kernel=3, dilations=(1, 2))
        values = [receptive_field(cfg, i) for i in range(7)]
        assert values == sorted(values)
        assert values[0] == 0

    def test_invalid_index(self):
        cfg = EncoderConfig(num_layers=2)
        with pytest.raises(ValueError):
            receptive_field(cfg, 3)
