import numpy as np
import pytest

import posenet.tensor as T
from posenet.data import BOS_ID, EOS_ID, PAD_ID
from posenet.decoder import DecoderConfig
from posenet.encoder import EncoderConfig
from posenet.gradcheck import finite_diff_check
from posenet.model import (
    ModelConfig,
    bind,
    forward_train,
    greedy_generate,
    init_parameters,
    shift_targets,
)
from posenet.tensor import Graph, sum_all


def tiny_config(vocab=8, d=4, L_enc=1, L_dec=1, max_length=12, **kwargs):
    return ModelConfig(
        vocab_size=vocab,
        depth=d,
        max_length=max_length,
        encoder=EncoderConfig(num_layers=L_enc, heads=2),
        decoder=DecoderConfig(num_layers=L_dec, heads=2),
        **kwargs,
    )


class TestForwardTrain:
    def test_logits_shape(self, rng):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=0)
        src = rng.integers(0, 8, size=(3, 5))
        tgt = rng.integers(0, 8, size=(3, 6))
        logits = forward_train(src, tgt, cfg, params)
        assert logits.shape == (3, 6, 8)

    def test_end_to_end_causality_bit_identical(self, rng):
        cfg = tiny_config(L_enc=1, L_dec=2)
        params = init_parameters(cfg, seed=1)
        src = rng.integers(4, 8, size=(1, 4))
        tgt = rng.integers(4, 8, size=(1, 6))
        base = forward_train(src, tgt, cfg, params).data
        for i in range(5):
            poked = tgt.copy()
            poked[0, i + 1 :] = rng.integers(4, 8, size=poked[0, i + 1 :].shape)
            out = forward_train(src, poked, cfg, params).data
            assert (out[0, : i + 1] == base[0, : i + 1]).all()

    def test_fixed_seed_forward_reproducible(self, rng):
        cfg = tiny_config()
        src = rng.integers(4, 8, size=(2, 3))
        tgt = rng.integers(4, 8, size=(2, 3))
        a = forward_train(src, tgt, cfg, init_parameters(cfg, seed=7)).data
        b = forward_train(src, tgt, cfg, init_parameters(cfg, seed=7)).data
        assert (a == b).all()

    def test_shift_targets_layout(self):
        tgt = np.array([[5, 6, EOS_ID, PAD_ID]])
        np.testing.assert_array_equal(
            shift_targets(tgt), [[BOS_ID, 5, 6, EOS_ID]]
        )

    def test_padding_invariance(self, rng):
        cfg = tiny_config(L_enc=2, L_dec=2)
        params = init_parameters(cfg, seed=3)
        src = np.array([[4, 5, 6, EOS_ID]])
        tgt = np.array([[6, 5, 4, EOS_ID]])
        base = forward_train(src, tgt, cfg, params).data
        src_padded = np.concatenate(
            [src, np.full((1, 3), PAD_ID, dtype=np.int64)], axis=1
        )
        out = forward_train(src_padded, tgt, cfg, params).data
        np.testing.assert_allclose(out, base, atol=1e-9)

    def test_id_out_of_range(self, rng):
        cfg = tiny_config(vocab=8)
        params = init_parameters(cfg, seed=0)
        with pytest.raises(IndexError):
            forward_train(np.array([[9]]), np.array([[4]]), cfg, params)

    def test_too_long_sequence(self, rng):
        cfg = tiny_config(max_length=4)
        params = init_parameters(cfg, seed=0)
        src = rng.integers(4, 8, size=(1, 5))
        with pytest.raises(ValueError, match="max_length"):
            forward_train(src, src, cfg, params)

    def test_end_to_end_gradient_check(self, rng):
        cfg = tiny_config(vocab=6, d=4, L_enc=1, L_dec=1)
        params = init_parameters(cfg, seed=5)
        src = np.array([[4, 5, EOS_ID], [5, 4, EOS_ID]])
        tgt = np.array([[5, 4, EOS_ID], [4, 5, EOS_ID]])
        weights = rng.normal(size=(2, 3, 6), scale=0.1)

        def f(p):
            logits = forward_train(src, tgt, cfg, p)
            return sum_all(T.mul(logits, weights))

        report = finite_diff_check(f, dict(params.items()), h=1e-4, tol=1e-3)
        assert report.passed, report.summary()


class TestTraceAsymmetry:
    def test_counts_and_conv_modes(self, rng):
        cfg = tiny_config(L_enc=3, L_dec=2)
        params = init_parameters(cfg, seed=2)
        src = rng.integers(4, 8, size=(1, 4))
        tgt = rng.integers(4, 8, size=(1, 4))
        with Graph() as g:
            forward_train(src, tgt, cfg, params)
        assert g.count("add_timing", scope="encoder") == 3
        assert g.count("add_timing", scope="decoder") <= 1
        enc_convs = g.trace(tag="conv1d", scope="encoder")
        dec_convs = g.trace(tag="conv1d", scope="decoder")
        assert enc_convs and dec_convs
        assert all(ev.meta["padding_mode"] == "symmetric" for ev in enc_convs)
        assert all(ev.meta["padding_mode"] == "causal" for ev in dec_convs)
        assert all(ev.meta["dilation"] == 1 for ev in dec_convs)
        assert any(ev.meta["dilation"] > 1 for ev in enc_convs)


class TestInitParameters:
    def test_same_seed_bit_identical(self):
        cfg = tiny_config()
        a = init_parameters(cfg, seed=9)
        b = init_parameters(cfg, seed=9)
        assert a.names() == b.names()
        for name, t in a.items():
            assert (t.data == b[name].data).all()

    def test_gains_ones_biases_zeros(self):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=4)
        for name, t in params.items():
            if name.endswith(".gain"):
                assert (t.data == 1.0).all()
            elif name.endswith(".bias") or name.endswith(".b0") or name.endswith(".b1"):
                assert (t.data == 0.0).all()

    def test_uniform_scaling_moment(self):
        cfg = ModelConfig(vocab_size=8, depth=64, max_length=8)
        params = init_parameters(cfg, seed=1)
        matrix = params["enc.0.box0.point"]  # [64, 64], fan-in 64
        assert matrix.shape == (64, 64)
        expected = (1 / np.sqrt(64)) / np.sqrt(3)
        assert abs(matrix.data.std() - expected) / expected < 0.2

    def test_tied_embeddings_share_tensor(self):
        cfg = tiny_config(tie_embeddings=True)
        params = init_parameters(cfg, seed=0)
        assert "embed.tgt" not in params
        bound = bind(cfg, params)
        assert bound.tgt_embed is bound.src_embed

    def test_total_count_reported(self):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=0)
        assert params.total_count() == sum(t.size for t in params.values())
        assert params.total_count() > 0


class TestGreedyGenerate:
    def test_forced_eos_yields_empty_output(self):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=0)
        params["out.b"].data[:] = 0.0
        params["out.b"].data[EOS_ID] = 1e6
        out = greedy_generate(np.array([[4, 5, EOS_ID]]), cfg, params)
        np.testing.assert_array_equal(out[0], [EOS_ID])

    def test_deterministic(self, rng):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=6)
        src = rng.integers(4, 8, size=(2, 4))
        a = greedy_generate(src, cfg, params)
        b = greedy_generate(src, cfg, params)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_1d_input_returns_single_array(self, rng):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=6)
        out = greedy_generate(np.array([4, 5, EOS_ID]), cfg, params)
        assert isinstance(out, np.ndarray)

    def test_respects_max_len(self, rng):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=8)
        params["out.b"].data[EOS_ID] = -1e6  # never emit EOS
        out = greedy_generate(np.array([[4, 5, EOS_ID]]), cfg, params, max_len=5)
        assert len(out[0]) <= 5

    def test_teacher_forcing_consistency(self, rng):
        cfg = tiny_config(L_enc=2, L_dec=2)
        params = init_parameters(cfg, seed=10)
        src = np.array([[4, 6, 5, EOS_ID]])
        generated = greedy_generate(src, cfg, params, max_len=6)[0]
        assert len(generated) >= 1
        logits = forward_train(src, generated[None, :], cfg, params).data
        for i, tok in enumerate(generated):
            assert int(np.argmax(logits[0, i])) == int(tok)
