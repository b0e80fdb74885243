"""Synthetic copy/reverse tasks, Adam with inverse-sqrt warmup, training loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import EOS, Batch, ConfigError, build_model, forward_loss, save_checkpoint

__all__ = [
    "TaskSpec",
    "TrainConfig",
    "TrainingRun",
    "AdamState",
    "Adam",
    "DivergenceMonitor",
    "make_batch",
    "validation_batches",
    "lr_at",
    "adam_step",
    "global_norm",
    "evaluate",
    "train_run",
]

FIRST_SYMBOL = EOS + 1


@dataclass
class TaskSpec:
    task: str = "copy"
    vocab: int = 32
    min_len: int = 5
    max_len: int = 20
    samples_per_epoch: int = 64 * 100
    seed: int = 0

    def validate(self, model_max_len=None):
        if self.task not in ("copy", "reverse"):
            raise ConfigError(f"task must be 'copy' or 'reverse', got {self.task!r}")
        if self.vocab < 4:
            raise ConfigError(f"vocab must be >= 4 (pad/bos/eos reserved), got {self.vocab}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        # framing adds one token (eos on the source, bos/eos on the target)
        if model_max_len is not None and self.max_len + 1 > model_max_len:
            raise ConfigError(f"max_len {self.max_len} + 1 framing token exceeds model max_len {model_max_len}")
        if self.samples_per_epoch < 1:
            raise ConfigError(f"samples_per_epoch must be positive, got {self.samples_per_epoch}")
        return self

    def target_for(self, source):
        return list(source) if self.task == "copy" else list(source)[::-1]


def make_batch(spec, rng, batch_size=64):
    """Draw ``batch_size`` random sequences and frame them for the task."""
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=batch_size)
    sources = [rng.integers(FIRST_SYMBOL, spec.vocab, size=n).tolist() for n in lengths]
    return Batch.from_sequences(sources, [spec.target_for(s) for s in sources])


def validation_batches(spec, n_samples=256, batch_size=64):
    """Fixed held-out set, drawn from a stream independent of training."""
    rng = np.random.default_rng([spec.seed, 0xE7A1])
    out = []
    left = n_samples
    while left > 0:
        k = min(batch_size, left)
        out.append(make_batch(spec, rng, k))
        left -= k
    return out


def lr_at(step, warmup, base_lr):
    """Linear warmup to ``base_lr`` then inverse-square-root decay."""
    if step < 1:
        raise ValueError(f"lr_at: step must be >= 1, got {step}")
    if warmup < 1:
        return base_lr / math.sqrt(step)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def adam_step(params, grads, state, lr, betas=(0.9, 0.98), eps=1e-8, clip_norm=None):
    """One bias-corrected Adam update of ``params`` (numpy arrays) in place.

    Returns the gradient global norm before clipping. A non-finite gradient
    skips the update and increments ``state.skipped``.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        state.skipped += 1
        return norm
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / (norm + 1e-6)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = lr * math.sqrt(c2) / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if factor != 1.0:
            g = g * g.dtype.type(factor)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (step * m / (np.sqrt(v) + eps * math.sqrt(c2))).astype(p.dtype, copy=False)
    return norm


class Adam:
    """Adam over a list of parameter tensors, reading their ``.grad``."""

    def __init__(self, params, betas=(0.9, 0.98), eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState.zeros_like([p.data for p in self.params])

    @property
    def skipped(self):
        return self.state.skipped

    def step(self, lr):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        return adam_step([p.data for p in self.params], grads, self.state, lr, self.betas, self.eps, self.clip_norm)

    def zero_grad(self):
        ad.zero_grad(self.params)


class DivergenceMonitor:
    """Flags a run whose NLL is non-finite, or above ``factor`` times the
    first recorded NLL for ``patience`` consecutive steps."""

    def __init__(self, factor=5.0, patience=200):
        self.factor = factor
        self.patience = patience
        self.first = None
        self.streak = 0
        self.diverged = False

    def update(self, nll):
        if not math.isfinite(nll):
            self.diverged = True
            return True
        if self.first is None:
            self.first = nll
        self.streak = self.streak + 1 if nll > self.factor * self.first else 0
        if self.streak >= self.patience:
            self.diverged = True
        return self.diverged


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    warmup: int = 400
    base_lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    eval_every: int = 250
    valid_samples: int = 256
    divergence_factor: float = 5.0
    divergence_patience: int = 200
    stop_on_divergence: bool = True
    target_accuracy: float | None = None

    def validate(self):
        for name in ("batch_size", "eval_every", "valid_samples", "divergence_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.warmup < 0 or self.base_lr <= 0:
            raise ConfigError("warmup must be >= 0 and base_lr positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        return self

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class TrainingRun:
    config: dict
    task: dict
    train: dict
    steps: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    valid_steps: list = field(default_factory=list)
    valid_nll: list = field(default_factory=list)
    valid_accuracy: list = field(default_factory=list)
    diverged: bool = False
    skipped_steps: int = 0
    best_valid_nll: float = math.inf
    best_step: int = 0
    wall_clock: float = 0.0
    model: object = None

    @property
    def final_valid_nll(self):
        return self.valid_nll[-1] if self.valid_nll else math.nan

    @property
    def final_valid_accuracy(self):
        return self.valid_accuracy[-1] if self.valid_accuracy else math.nan

    def summary(self):
        return {
            "variant": self.config["variant"],
            "seed": self.config["seed"],
            "steps": len(self.steps),
            "final_train_nll": self.nll[-1] if self.nll else None,
            "final_valid_nll": self.final_valid_nll if self.valid_nll else None,
            "final_valid_accuracy": self.final_valid_accuracy if self.valid_accuracy else None,
            "best_valid_nll": self.best_valid_nll if self.valid_nll else None,
            "diverged": self.diverged,
            "skipped_steps": self.skipped_steps,
        }


def evaluate(model, batches):
    """Teacher-forced NLL and token accuracy, weighted by real target tokens."""
    was = model.training
    model.eval()
    total = correct = nll = 0.0
    with ad.no_grad():
        for b in batches:
            loss, acc = forward_loss(model, b)
            n = float(b.target_mask.sum())
            nll += float(loss.data) * n
            correct += acc * n
            total += n
    model.train(was)
    return nll / total, correct / total


def train_run(cfg, spec, steps=None, eval_every=None, hp=None, out_dir=None, log=None):
    """Train a fresh model on the synthetic task and record its curves.

    ``hp`` supplies the optimizer/schedule settings; ``steps`` and
    ``eval_every`` override the corresponding fields. With ``out_dir`` the
    per-step log (JSON lines) and best-validation checkpoint are written there.
    ``log`` is an optional callable receiving each JSON record.
    """
    hp = dataclasses.replace(hp or TrainConfig())
    if steps is not None:
        hp.steps = steps
    if eval_every is not None:
        hp.eval_every = eval_every
    hp.validate()
    cfg.validate()
    spec.validate(cfg.max_len)
    if spec.vocab != cfg.vocab:
        raise ConfigError(f"task vocab {spec.vocab} != model vocab {cfg.vocab}")

    model = build_model(cfg)
    params = model.parameters()
    opt = Adam(params, hp.betas, hp.adam_eps, hp.clip_norm)
    rng = np.random.default_rng([spec.seed, cfg.seed])
    valid = validation_batches(spec, hp.valid_samples, hp.batch_size)
    run = TrainingRun(cfg.to_dict(), dataclasses.asdict(spec), hp.to_dict(), model=model)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "log.jsonl", "w")

    start = time.perf_counter()
    monitor = DivergenceMonitor(hp.divergence_factor, hp.divergence_patience)
    try:
        model.train()
        for step in range(1, hp.steps + 1):
            batch = make_batch(spec, rng, hp.batch_size)
            loss, _ = forward_loss(model, batch)
            nll = float(loss.data)
            lr = lr_at(step, hp.warmup, hp.base_lr)
            if math.isfinite(nll):
                ad.backward(loss)
                gnorm = opt.step(lr)
            else:
                gnorm = math.nan
                opt.state.skipped += 1
            opt.zero_grad()

            run.steps.append(step)
            run.nll.append(nll)
            run.grad_norm.append(gnorm)
            run.lr.append(lr)
            record = {"step": step, "nll": _json_float(nll), "grad_norm": _json_float(gnorm), "lr": lr}
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
            run.diverged = monitor.update(nll)

            last = step == hp.steps or (run.diverged and hp.stop_on_divergence)
            if step % hp.eval_every == 0 or last:
                v_nll, v_acc = evaluate(model, valid) if math.isfinite(nll) else (math.nan, 0.0)
                run.valid_steps.append(step)
                run.valid_nll.append(v_nll)
                run.valid_accuracy.append(v_acc)
                if math.isfinite(v_nll) and v_nll < run.best_valid_nll:
                    run.best_valid_nll = v_nll
                    run.best_step = step
                    if out is not None:
                        save_checkpoint(model, out / "best.npz", {"step": step, "valid_nll": v_nll})
                if hp.target_accuracy is not None and v_acc >= hp.target_accuracy:
                    break
            if run.diverged and hp.stop_on_divergence:
                break
    finally:
        if log_file is not None:
            log_file.close()
        model.eval()
    run.skipped_steps = opt.skipped
    run.wall_clock = time.perf_counter() - start
    return run


def _json_float(x):
    return x if math.isfinite(x) else None

