import math

import numpy as np
import pytest

from lnlab import autodiff as ad
from lnlab.model import (
    BOS,
    EOS,
    PAD,
    Batch,
    CheckpointError,
    ConfigError,
    ModelConfig,
    Trace,
    build_model,
    causal_mask,
    forward_loss,
    load_checkpoint,
    save_checkpoint,
    sequence_nll,
    sinusoidal_positions,
)
from lnlab.nn import LayerNorm, Variant, beta_coeff
from lnlab.train import TaskSpec, make_batch

TINY = dict(n_enc=2, n_dec=2, d=8, heads=2, d_ff=16, vocab=10, max_len=8)
SMALL = dict(n_enc=2, n_dec=2, d=32, heads=4, d_ff=64, vocab=16, max_len=32)


def tiny_batch():
    return Batch.from_sequences([[3, 4], [5, 6, 7]], [[4, 3], [7, 6, 5]])


def params_bytes(model):
    return [(n, p.data.tobytes()) for n, p in model.named_parameters()]


class TestBuild:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_same_seed_is_bitwise_identical(self, variant):
        a = build_model(ModelConfig(**TINY, variant=variant, seed=3))
        b = build_model(ModelConfig(**TINY, variant=variant, seed=3))
        assert params_bytes(a) == params_bytes(b)

    def test_different_seed_differs(self):
        a = build_model(ModelConfig(**TINY, seed=0))
        b = build_model(ModelConfig(**TINY, seed=1))
        assert params_bytes(a) != params_bytes(b)

    def test_head_dim(self):
        assert ModelConfig(d=64, heads=4).head_dim == 16

    def test_b2t_noln_coefficients_stored(self):
        m = build_model(ModelConfig(n_enc=9, n_dec=6, d=64, heads=4, d_ff=64, variant="b2t_noln"))
        for layer in m.decoder:
            assert layer.alpha == 0.5
            assert layer.beta == pytest.approx(0.4353, abs=1e-4)
        for layer in m.encoder:
            assert layer.alpha == 9 ** -0.15
            assert layer.beta == beta_coeff(64)

    def test_final_ln_only_for_preln(self):
        for v in Variant:
            m = build_model(ModelConfig(**TINY, variant=v))
            assert (m.dec_final_ln is not None) == (v is Variant.PRELN)
            assert (m.enc_final_ln is not None) == (v is Variant.PRELN)
        m = build_model(ModelConfig(**TINY, variant="preln", preln_final_ln=False))
        assert m.dec_final_ln is None

    def test_b2t_noln_has_no_layer_norms(self):
        m = build_model(ModelConfig(**TINY, variant="b2t_noln"))
        assert not any(isinstance(x, LayerNorm) for x in m.modules())

    def test_ln_eps_propagates(self):
        m = build_model(ModelConfig(**TINY, ln_eps=1e-3))
        assert all(x.eps == 1e-3 for x in m.modules() if isinstance(x, LayerNorm))

    def test_output_projection_has_no_bias(self):
        m = build_model(ModelConfig(**TINY))
        assert m.out_proj.bias is None

    def test_float32(self):
        m = build_model(ModelConfig(**TINY, dtype="float32"))
        assert all(p.dtype == np.float32 for p in m.parameters())
        assert m.forward(tiny_batch()).dtype == np.float32

    @pytest.mark.parametrize(
        "field,value",
        [("n_enc", 0), ("d", -8), ("heads", 3), ("vocab", 3), ("dropout", 1.0), ("dtype", "float16"), ("ln_eps", 0.0)],
    )
    def test_invalid_field_is_named(self, field, value):
        with pytest.raises(ConfigError, match=field if field != "heads" else "divisible"):
            build_model(ModelConfig(**{**TINY, field: value}))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="deepnorm")

    def test_config_round_trip_and_unknown_keys(self):
        cfg = ModelConfig(**TINY, variant="b2t")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="bogus"):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


class TestMasksAndPositions:
    def test_causal_mask_examples(self):
        np.testing.assert_array_equal(causal_mask(1), [[0.0]])
        np.testing.assert_array_equal(causal_mask(2), [[0.0, -np.inf], [0.0, 0.0]])

    def test_causal_mask_softmax_rows_sum_to_one(self):
        z = ad.tensor(np.random.default_rng(0).normal(size=(6, 6)) + causal_mask(6))
        np.testing.assert_allclose(ad.softmax(z, axis=-1).data.sum(axis=-1), 1.0)

    def test_causal_mask_rejects_zero(self):
        with pytest.raises(ValueError):
            causal_mask(0)

    def test_sinusoid_values(self):
        pe = sinusoidal_positions(3, 4)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
        np.testing.assert_allclose(pe[2], [math.sin(2), math.cos(2), math.sin(0.02), math.cos(0.02)])

    def test_batch_framing(self):
        b = Batch.from_sequences([[5, 7, 9]], [[9, 7, 5]])
        assert b.source.tolist() == [[5, 7, 9, EOS]]
        assert b.target_in.tolist() == [[BOS, 9, 7, 5]]
        assert b.target_out.tolist() == [[9, 7, 5, EOS]]
        np.testing.assert_array_equal(b.target_out[:, :-1], b.target_in[:, 1:])

    def test_batch_padding(self):
        b = tiny_batch()
        assert b.source[0].tolist() == [3, 4, EOS, PAD]
        assert b.target_mask.tolist() == [[True, True, True, False], [True] * 4]


class TestLoss:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_untrained_nll_near_uniform(self, variant):
        # At init the logits are roughly Gaussian with per-row variance s2, so
        # the expected NLL is about ln V + s2 / 2 rather than exactly ln V.
        for seed in range(3):
            m = build_model(ModelConfig(**SMALL, variant=variant, seed=seed))
            b = make_batch(TaskSpec(vocab=16, seed=seed), np.random.default_rng(seed), 16)
            z = m.forward(b).data[b.target_mask]
            nll = float(forward_loss(m, b)[0].data)
            oracle = math.log(16) + z.var(axis=-1).mean() / 2
            assert abs(nll - oracle) < 0.35
            assert abs(nll - math.log(16)) < 1.25

    def test_one_hot_logits_give_zero_nll(self):
        b = tiny_batch()
        logits = np.full(b.target_out.shape + (10,), -1e3)
        np.put_along_axis(logits, b.target_out[..., None], 1e3, axis=-1)
        loss, acc, per_token = sequence_nll(ad.tensor(logits), b)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
        assert acc == 1.0
        assert np.all(per_token[~b.target_mask] == 0)

    def test_nll_matches_numpy_oracle(self):
        m = build_model(ModelConfig(**TINY, seed=4))
        b = tiny_batch()
        z = m.forward(b).data
        lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) + z.max(-1)
        tok = lse - np.take_along_axis(z, b.target_out[..., None], -1)[..., 0]
        expected = tok[b.target_mask].mean()
        assert float(forward_loss(m, b)[0].data) == pytest.approx(expected, rel=1e-12)

    def test_label_smoothing_raises_loss_on_confident_prediction(self):
        b = tiny_batch()
        logits = np.zeros(b.target_out.shape + (10,))
        np.put_along_axis(logits, b.target_out[..., None], 20.0, axis=-1)
        plain = float(sequence_nll(ad.tensor(logits), b)[0].data)
        smooth = float(sequence_nll(ad.tensor(logits), b, smoothing=0.1)[0].data)
        assert smooth > plain

    def test_all_pad_target_is_empty_batch(self):
        m = build_model(ModelConfig(**TINY))
        b = tiny_batch()
        b.target_mask[:] = False
        with pytest.raises(ValueError, match="empty batch"):
            forward_loss(m, b)

    def test_out_of_vocab(self):
        m = build_model(ModelConfig(**TINY))
        b = tiny_batch()
        b.source[0, 0] = 10
        with pytest.raises(ValueError, match="outside"):
            forward_loss(m, b)

    def test_too_long(self):
        m = build_model(ModelConfig(**{**TINY, "max_len": 3}))
        with pytest.raises(ValueError, match="max_len"):
            forward_loss(m, tiny_batch())


@pytest.mark.parametrize("variant", list(Variant))
class TestInvariants:
    def test_causal_leak(self, variant):
        m = build_model(ModelConfig(**TINY, variant=variant, seed=1))
        b = Batch.from_sequences([[3, 4, 5, 6, 7]], [[7, 6, 5, 4, 3]])
        base = sequence_nll(m.forward(b), b)[2]
        for t in range(1, b.target_in.shape[1]):
            b2 = Batch(b.source, b.target_in.copy(), b.target_out, b.source_mask, b.target_mask)
            b2.target_in[0, t] = 9 if b.target_in[0, t] != 9 else 8
            changed = sequence_nll(m.forward(b2), b2)[2]
            np.testing.assert_array_equal(changed[0, :t], base[0, :t])
            assert not np.array_equal(changed[0, t:], base[0, t:])

    def test_padding_invariance(self, variant):
        m = build_model(ModelConfig(**TINY, variant=variant, seed=2))
        b = tiny_batch()
        base = float(forward_loss(m, b)[0].data)
        for name in ("source", "target_in", "target_out"):
            arr = getattr(b, name).copy()
            mask = b.source_mask if name == "source" else b.target_mask
            arr[~mask] = 8
            b2 = Batch(**{**b.__dict__, name: arr})
            assert float(forward_loss(m, b2)[0].data) == base

    def test_full_model_gradcheck(self, variant):
        m = build_model(ModelConfig(**TINY, variant=variant, seed=5))
        rng = np.random.default_rng(6)
        for p in m.parameters():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        b = Batch.from_sequences([[3, 4], [5]], [[4, 3], [5]])
        params = m.parameters()
        err = ad.grad_check(lambda *_: forward_loss(m, b)[0], params)
        assert err < 1e-5


def test_b2t_ablated_equals_postln_bitwise():
    b = Batch.from_sequences([[3, 4, 5], [6, 7]], [[5, 4, 3], [7, 6]])
    out = []
    for v in ("b2t", "postln"):
        m = build_model(ModelConfig(**TINY, variant=v, seed=8))
        if v == "b2t":
            m.ablate_b2t()
        loss, _ = forward_loss(m, b)
        ad.backward(loss)
        out.append([loss.data.tobytes()] + [p.grad.tobytes() for p in m.parameters()])
    assert out[0] == out[1]


def test_trace_records_every_layer():
    m = build_model(ModelConfig(**{**TINY, "n_enc": 3, "n_dec": 2}))
    trace = Trace()
    forward_loss(m, tiny_batch(), trace)
    assert len(trace.encoder_outputs) == 3 and len(trace.decoder_outputs) == 2
    assert sorted(trace.probes) == [("decoder", 1), ("decoder", 2), ("encoder", 1), ("encoder", 2), ("encoder", 3)]
    labels = [lab for lab, _ in trace.probes[("decoder", 1)]]
    assert labels[0] == "layer_input" and "cross_attn_ln_in" in labels


def test_dropout_only_in_training_mode():
    m = build_model(ModelConfig(**TINY, dropout=0.5))
    b = tiny_batch()
    a = m.forward(b).data
    assert np.array_equal(a, m.forward(b).data)
    m.train()
    assert not np.array_equal(a, m.forward(b).data)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_round_trip(self, tmp_path, variant):
        m = build_model(ModelConfig(**TINY, variant=variant, seed=9))
        for p in m.parameters():
            p.data = p.data + 1.0
        path = save_checkpoint(m, tmp_path / "m.npz", {"step": 3})
        m2 = load_checkpoint(path)
        assert m2.cfg == m.cfg
        assert params_bytes(m2) == params_bytes(m)
        b = tiny_batch()
        assert float(forward_loss(m2, b)[0].data) == float(forward_loss(m, b)[0].data)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.npz")

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.npz"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(build_model(ModelConfig(**TINY)), tmp_path / "m.npz")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_npz(self, tmp_path):
        p = tmp_path / "other.npz"
        np.savez(p, x=np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
