"""Encoder-decoder transformer assembly, sequence loss and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nn import DecoderLayer, EncoderLayer, LayerNorm, Linear, Module, Variant, alpha_coeff, beta_coeff

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "ConfigError",
    "CheckpointError",
    "ModelConfig",
    "Batch",
    "Trace",
    "Transformer",
    "build_model",
    "causal_mask",
    "padding_mask",
    "sinusoidal_positions",
    "sequence_nll",
    "forward_loss",
    "save_checkpoint",
    "load_checkpoint",
]

PAD, BOS, EOS = 0, 1, 2

CHECKPOINT_FORMAT = "lnlab-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of range."""


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated or not in the expected format."""


@dataclass
class ModelConfig:
    n_enc: int = 6
    n_dec: int = 6
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    vocab: int = 32
    max_len: int = 64
    variant: Variant = Variant.POSTLN
    seed: int = 0
    dropout: float = 0.0
    label_smoothing: float = 0.0
    preln_final_ln: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)

    def validate(self):
        for name in ("n_enc", "n_dec", "d", "heads", "d_ff", "vocab", "max_len"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.vocab < 4:
            raise ConfigError(f"vocab must be >= 4 (pad/bos/eos reserved), got {self.vocab}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        return self

    @property
    def head_dim(self):
        return self.d // self.heads

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**data).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Batch:
    """Token matrices for one batch; masks are True at real (non-pad) tokens."""

    source: np.ndarray
    target_in: np.ndarray
    target_out: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray

    @classmethod
    def from_sequences(cls, sources, targets):
        """Frame raw token lists: source + eos, bos + target, target + eos."""
        if len(sources) != len(targets) or not sources:
            raise ValueError("need equally many (and at least one) sources and targets")
        src = [list(s) + [EOS] for s in sources]
        tin = [[BOS] + list(t) for t in targets]
        tout = [list(t) + [EOS] for t in targets]
        s, sm = _pad(src)
        ti, tm = _pad(tin)
        to, _ = _pad(tout)
        return cls(s, ti, to, sm, tm)

    def __len__(self):
        return self.source.shape[0]


def _pad(seqs):
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def causal_mask(n):
    """Additive (n, n) mask: 0 where key j <= query i, -inf above the diagonal."""
    if n < 1:
        raise ValueError(f"causal_mask: length must be >= 1, got {n}")
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def padding_mask(mask):
    """Additive (batch, 1, 1, len) key mask from a boolean real-token mask."""
    return np.where(mask, 0.0, -np.inf)[:, None, None, :]


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


@dataclass
class Trace:
    """Activations recorded during one forward pass.

    With ``retain=True`` every recorded tensor keeps its gradient after
    backward, which is how the diagnostics read per-layer gradients.
    """

    retain: bool = False
    encoder_outputs: list = field(default_factory=list)
    decoder_outputs: list = field(default_factory=list)
    probes: dict = field(default_factory=dict)
    decoder_final: object = None

    def _keep(self, t):
        if self.retain and t.requires_grad:
            t.retain_grad()
        return t

    def prober(self, side, layer):
        rows = self.probes.setdefault((side, layer), [])

        def probe(label, t):
            rows.append((label, self._keep(t)))
            return t

        return probe


def _silent(label, t):
    return t


class Transformer(Module):
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        std = d ** -0.5
        self.src_embed = ad.Tensor(rng.normal(0.0, std, size=(cfg.vocab, d)).astype(dt), requires_grad=True, dtype=dt)
        self.tgt_embed = ad.Tensor(rng.normal(0.0, std, size=(cfg.vocab, d)).astype(dt), requires_grad=True, dtype=dt)
        v = cfg.variant
        enc_ab = dec_ab = (None, None)
        if v is Variant.B2T_NOLN:
            enc_ab = (alpha_coeff(cfg.n_enc), beta_coeff(d))
            dec_ab = (alpha_coeff(cfg.n_dec), beta_coeff(d))
        self.encoder = [EncoderLayer(d, cfg.heads, cfg.d_ff, v, rng, *enc_ab, dtype=dt) for _ in range(cfg.n_enc)]
        self.decoder = [DecoderLayer(d, cfg.heads, cfg.d_ff, v, rng, *dec_ab, dtype=dt) for _ in range(cfg.n_dec)]
        self.enc_final_ln = self.dec_final_ln = None
        if v is Variant.PRELN and cfg.preln_final_ln:
            self.enc_final_ln = LayerNorm(d, cfg.ln_eps, dtype=dt)
            self.dec_final_ln = LayerNorm(d, cfg.ln_eps, dtype=dt)
        for m in self.modules():
            if isinstance(m, LayerNorm):
                m.eps = cfg.ln_eps
        self.out_proj = Linear(d, cfg.vocab, rng, bias=False, dtype=dt)
        self.positions = sinusoidal_positions(cfg.max_len, d).astype(dt)
        self.training = False
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _drop(self, x):
        if not self.training or self.cfg.dropout <= 0:
            return x
        return ad.dropout(x, self.cfg.dropout, self.dropout_rng)

    def ablate_b2t(self):
        """Test hook: strip the bottom-to-top term from every layer."""
        for layer in self.encoder + self.decoder:
            layer.b2t_connection = False

    def _embed(self, table, ids):
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        x = ad.scale(ad.embedding(table, ids), math.sqrt(self.cfg.d))
        return self._drop(ad.add_constant(x, self.positions[:n]))

    def forward(self, batch, trace=None):
        """Logits of shape (batch, target length, vocab)."""
        cfg = self.cfg
        for name in ("source", "target_in", "target_out"):
            ids = getattr(batch, name)
            if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
                raise ValueError(f"{name} contains token ids outside [0, {cfg.vocab})")
        src_keys = padding_mask(batch.source_mask)
        x = self._embed(self.src_embed, batch.source)
        for i, layer in enumerate(self.encoder, 1):
            probe = trace.prober("encoder", i) if trace is not None else _silent
            x = layer(x, src_keys, drop=self._drop, probe=probe)
            if trace is not None:
                trace.encoder_outputs.append(trace._keep(x))
        memory = self.enc_final_ln(x) if self.enc_final_ln is not None else x

        n = batch.target_in.shape[1]
        self_mask = causal_mask(n)[None, None] + padding_mask(batch.target_mask)
        y = self._embed(self.tgt_embed, batch.target_in)
        for i, layer in enumerate(self.decoder, 1):
            probe = trace.prober("decoder", i) if trace is not None else _silent
            y = layer(y, memory, self_mask, src_keys, drop=self._drop, probe=probe)
            if trace is not None:
                trace.decoder_outputs.append(trace._keep(y))
        if self.dec_final_ln is not None:
            y = self.dec_final_ln(y)
        if trace is not None:
            trace.decoder_final = trace._keep(y)
        return self.out_proj(y)


def build_model(cfg):
    """Fresh model with parameters drawn deterministically from ``cfg.seed``."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(cfg).__name__}")
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Transformer(cfg)


def sequence_nll(logits, batch, smoothing=0.0):
    """Mean NLL over real target tokens, per-token accuracy and per-token NLL."""
    weights = batch.target_mask
    if not weights.any():
        raise ValueError("empty batch: no non-pad target positions")
    loss, token_nll = ad.token_cross_entropy(logits, batch.target_out, weights, smoothing)
    pred = logits.data.argmax(axis=-1)
    acc = float((pred == batch.target_out)[weights].mean())
    return loss, acc, np.where(weights, token_nll, 0.0)


def forward_loss(model, batch, trace=None):
    """``(nll, accuracy)``: scalar loss tensor and token accuracy on real targets."""
    if len(batch) == 0 or not batch.target_mask.any():
        raise ValueError("empty batch: no non-pad target positions")
    logits = model.forward(batch, trace)
    loss, acc, _ = sequence_nll(logits, batch, model.cfg.label_smoothing)
    return loss, acc


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None):
    """Write config and flat parameter arrays to a single ``.npz`` file."""
    path = Path(path)
    names = []
    arrays = {}
    for name, p in model.named_parameters():
        names.append(name)
        arrays[name] = p.data
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "parameters": names,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    """Rebuild a model from :func:`save_checkpoint` output."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an lnlab checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model = build_model(ModelConfig.from_dict(meta["config"]))
    params = dict(model.named_parameters())
    if sorted(params) != sorted(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].astype(p.dtype)
    return model
