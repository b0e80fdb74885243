import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lnlab import autodiff as ad
from lnlab.model import EOS, ConfigError, ModelConfig, load_checkpoint
from lnlab.train import (
    Adam,
    AdamState,
    DivergenceMonitor,
    TaskSpec,
    TrainConfig,
    adam_step,
    evaluate,
    lr_at,
    make_batch,
    train_run,
    validation_batches,
)

TINY = ModelConfig(n_enc=1, n_dec=1, d=16, heads=2, d_ff=32, vocab=12, max_len=10)
TINY_TASK = TaskSpec(vocab=12, min_len=2, max_len=6, seed=0)


class TestTasks:
    def test_copy_and_reverse_targets(self):
        assert TaskSpec(task="copy").target_for([5, 7, 9]) + [EOS] == [5, 7, 9, EOS]
        assert TaskSpec(task="reverse").target_for([5, 7, 9]) + [EOS] == [9, 7, 5, EOS]

    @pytest.mark.parametrize("task", ["copy", "reverse"])
    def test_batches_follow_task(self, task):
        spec = TaskSpec(task=task, vocab=16, min_len=3, max_len=9)
        b = make_batch(spec, np.random.default_rng(0), 32)
        for i in range(32):
            src = b.source[i][b.source_mask[i]].tolist()
            tgt = b.target_out[i][b.target_mask[i]].tolist()
            assert src[-1] == EOS and tgt[-1] == EOS
            body = src[:-1] if task == "copy" else src[:-1][::-1]
            assert tgt[:-1] == body
            assert 3 <= len(body) <= 9
            assert min(body) >= 3 and max(body) < 16

    def test_same_seed_same_batches(self):
        a = make_batch(TaskSpec(), np.random.default_rng(5), 8)
        b = make_batch(TaskSpec(), np.random.default_rng(5), 8)
        for name in ("source", "target_in", "target_out"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_validation_set_fixed_and_sized(self):
        a = validation_batches(TaskSpec(), 100, 32)
        b = validation_batches(TaskSpec(), 100, 32)
        assert [len(x) for x in a] == [32, 32, 32, 4]
        assert all(np.array_equal(x.source, y.source) for x, y in zip(a, b))

    @pytest.mark.parametrize(
        "kw", [dict(task="sort"), dict(vocab=3), dict(min_len=0), dict(min_len=5, max_len=4), dict(max_len=64)]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            TaskSpec(**kw).validate(model_max_len=64)


class TestSchedule:
    def test_examples(self):
        assert lr_at(400, 400, 1e-3) == 1e-3
        assert lr_at(200, 400, 1e-3) == pytest.approx(5e-4)
        assert lr_at(1600, 400, 1e-3) == pytest.approx(5e-4)

    def test_rejects_step_zero(self):
        with pytest.raises(ValueError):
            lr_at(0, 400, 1e-3)

    @given(warmup=st.integers(1, 10_000))
    def test_continuous_at_warmup(self, warmup):
        assert lr_at(warmup, warmup, 1.0) == 1.0
        assert abs(lr_at(warmup + 1, warmup, 1.0) - lr_at(warmup, warmup, 1.0)) < 1.0 / warmup + 1e-12

    @given(warmup=st.integers(1, 1000), step=st.integers(1, 100_000))
    def test_increasing_then_strictly_decreasing(self, warmup, step):
        a, b = lr_at(step, warmup, 1.0), lr_at(step + 1, warmup, 1.0)
        if step >= warmup:
            assert b < a
        else:
            assert b > a


class TestAdam:
    def test_zero_gradient_leaves_params_and_decays_moments(self):
        p = [np.array([1.0, -2.0])]
        before = p[0].copy()
        adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), lr=0.1)
        np.testing.assert_array_equal(p[0], before)
        # with history, the moments decay geometrically
        state = AdamState([np.array([0.5, 0.5])], [np.array([0.25, 0.25])], t=3)
        adam_step(p, [np.zeros(2)], state, lr=0.1)
        np.testing.assert_allclose(state.m[0], 0.45)
        np.testing.assert_allclose(state.v[0], 0.245)

    def test_first_step_moves_by_lr_in_sign_direction(self):
        p = [np.array([0.0, 0.0, 0.0])]
        adam_step(p, [np.array([3.0, -0.01, 0.0])], AdamState.zeros_like(p), lr=0.01)
        np.testing.assert_allclose(p[0], [-0.01, 0.01, 0.0], rtol=1e-6)

    def test_constant_gradient_update_tends_to_lr(self):
        p = [np.zeros(4)]
        state = AdamState.zeros_like(p)
        g = np.array([0.3, -2.0, 1e-3, 5.0])
        for _ in range(2000):
            prev = p[0].copy()
            adam_step(p, [g], state, lr=1e-3)
        np.testing.assert_allclose(np.abs(p[0] - prev), 1e-3, rtol=1e-5)

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        p = [rng.normal(size=5)]
        ref = p[0].copy()
        m = v = np.zeros(5)
        state = AdamState.zeros_like(p)
        for t in range(1, 6):
            g = rng.normal(size=5)
            adam_step(p, [g], state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.98 * v + 0.02 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.98**t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12)

    def test_nan_gradient_skips_and_counts(self):
        p = [np.ones(3)]
        state = AdamState.zeros_like(p)
        norm = adam_step(p, [np.array([1.0, np.nan, 0.0])], state, lr=0.1)
        assert math.isnan(norm)
        assert state.skipped == 1 and state.t == 0
        np.testing.assert_array_equal(p[0], 1.0)
        np.testing.assert_array_equal(state.m[0], 0.0)

    def test_clipping_scales_gradient(self):
        g = np.array([30.0, 40.0])
        p1, p2 = [np.zeros(2)], [np.zeros(2)]
        s1, s2 = AdamState.zeros_like(p1), AdamState.zeros_like(p2)
        assert adam_step(p1, [g], s1, 0.1, clip_norm=1.0) == 50.0
        adam_step(p2, [g / (50.0 + 1e-6)], s2, 0.1)
        np.testing.assert_allclose(s1.m[0], s2.m[0], rtol=1e-12)

    def test_adam_reads_tensor_grads(self):
        w = ad.tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam([w])
        ad.backward(ad.tensor_sum(ad.mul(w, w)))
        opt.step(0.5)
        np.testing.assert_allclose(w.data, [0.5, 1.5])
        opt.zero_grad()
        assert w.grad is None or not np.any(w.grad)


class TestDivergenceMonitor:
    def test_non_finite(self):
        m = DivergenceMonitor()
        assert not m.update(3.0)
        assert m.update(math.inf)

    def test_requires_consecutive_steps(self):
        m = DivergenceMonitor(factor=5.0, patience=3)
        m.update(1.0)
        assert not m.update(6.0)
        assert not m.update(6.0)
        assert not m.update(4.0)  # streak reset
        assert not m.update(6.0) and not m.update(6.0)
        assert m.update(6.0)

    def test_threshold_is_strict(self):
        m = DivergenceMonitor(factor=5.0, patience=1)
        m.update(1.0)
        assert not m.update(5.0)
        assert m.update(5.0001)


class TestTrainRun:
    def test_zero_steps(self):
        run = train_run(TINY, TINY_TASK, steps=0)
        assert run.steps == [] and run.nll == [] and run.valid_nll == []
        assert not run.diverged

    def test_reproducible(self):
        hp = TrainConfig(batch_size=8, warmup=5, valid_samples=16)
        a = train_run(TINY, TINY_TASK, steps=6, eval_every=3, hp=hp)
        b = train_run(TINY, TINY_TASK, steps=6, eval_every=3, hp=hp)
        assert a.nll == b.nll and a.valid_nll == b.valid_nll and a.grad_norm == b.grad_norm
        assert a.valid_steps == [3, 6]

    def test_learns_and_writes_outputs(self, tmp_path):
        hp = TrainConfig(batch_size=16, warmup=20, base_lr=3e-3, valid_samples=32)
        records = []
        run = train_run(TINY, TINY_TASK, steps=60, eval_every=30, hp=hp, out_dir=tmp_path, log=records.append)
        assert run.nll[-1] < run.nll[0]
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 60
        first = json.loads(lines[0])
        assert sorted(first) == ["grad_norm", "lr", "nll", "step"] and first["step"] == 1
        assert records[0] == first
        best = load_checkpoint(tmp_path / "best.npz")
        valid = validation_batches(TINY_TASK, 32, 16)
        assert evaluate(best, valid)[0] == pytest.approx(run.best_valid_nll, rel=1e-12)

    def test_divergence_stops_run(self):
        hp = TrainConfig(batch_size=8, warmup=1, base_lr=50.0, valid_samples=8, divergence_patience=3)
        run = train_run(TINY, TINY_TASK, steps=300, eval_every=100, hp=hp)
        assert run.diverged
        assert len(run.steps) < 300

    def test_early_stop_on_target_accuracy(self):
        hp = TrainConfig(batch_size=8, warmup=5, valid_samples=8, target_accuracy=0.0)
        run = train_run(TINY, TINY_TASK, steps=20, eval_every=2, hp=hp)
        assert run.steps == [1, 2]

    def test_vocab_mismatch(self):
        with pytest.raises(ConfigError, match="vocab"):
            train_run(TINY, TaskSpec(vocab=20, max_len=6), steps=1)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ConfigError):
            train_run(TINY, TINY_TASK, hp=TrainConfig(batch_size=0))

    def test_summary(self):
        run = train_run(TINY, TINY_TASK, steps=2, eval_every=1, hp=TrainConfig(batch_size=4, valid_samples=4))
        s = run.summary()
        assert s["steps"] == 2 and s["diverged"] is False and s["variant"] == "postln"


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), task=st.sampled_from(["copy", "reverse"]))
def test_batch_invariants(seed, task):
    spec = TaskSpec(task=task, vocab=20, min_len=1, max_len=7)
    b = make_batch(spec, np.random.default_rng(seed), 5)
    np.testing.assert_array_equal(b.target_in[:, 1:][b.target_mask[:, 1:]], b.target_out[:, :-1][b.target_mask[:, 1:]])
    assert b.source_mask.sum() == b.target_mask.sum()
