"""Transformer building blocks and the four layer-normalization placements.

The layer classes take the variant at construction time and wire their
sub-layers accordingly:

* ``POSTLN``   ``LN(x + F(x))`` after every sub-layer.
* ``PRELN``    ``x + F(LN(x))`` for every sub-layer.
* ``B2T``      Post-LN, plus a connection from the layer input to just
  before the layer's last LN: ``LN(x_inp + x_ffn + FFN(x_ffn))``.
* ``B2T_NOLN`` no LN inside the layer; ``alpha * x_inp + beta * (x_ffn + FFN(x_ffn))``.

Layers accept an optional ``probe`` callback ``probe(label, tensor) -> tensor``
used by the diagnostics to capture named activations, and a ``drop`` callback
that applies dropout during training only.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Variant",
    "Module",
    "Linear",
    "LayerNorm",
    "MultiHeadAttention",
    "FeedForward",
    "EncoderLayer",
    "DecoderLayer",
    "layer_norm",
    "multi_head_attention",
    "ffn",
    "sublayer_postln",
    "sublayer_preln",
    "alpha_coeff",
    "beta_coeff",
]


class Variant(str, enum.Enum):
    POSTLN = "postln"
    PRELN = "preln"
    B2T = "b2t"
    B2T_NOLN = "b2t_noln"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {
            "postln": cls.POSTLN,
            "preln": cls.PRELN,
            "b2t": cls.B2T,
            "b2tnoln": cls.B2T_NOLN,
            "b2twithoutln": cls.B2T_NOLN,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected one of {[v.value for v in cls]}") from None


def alpha_coeff(n_layers):
    """Weight on the layer input for B2T without LN: ``min(N/12, N**-0.15)``."""
    if n_layers < 1:
        raise ValueError(f"alpha_coeff: layer count must be >= 1, got {n_layers}")
    return min(n_layers / 12.0, n_layers ** -0.15)


def beta_coeff(d_model):
    """Weight on the sub-layer path for B2T without LN: ``d**-0.2``."""
    if d_model < 1:
        raise ValueError(f"beta_coeff: dimension must be >= 1, got {d_model}")
    return d_model ** -0.2


def _identity(x):
    return x


def _no_probe(label, x):
    return x


class Module:
    """Minimal parameter container; parameters are found by attribute order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)


class Linear(Module):
    """Affine map with Glorot-uniform weight and zero bias."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float64):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def zero_(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class LayerNorm(Module):
    """Learned gain/bias normalization over the last axis.

    ``identity`` is a test hook that turns the module into a pass-through.
    """

    def __init__(self, d, eps=1e-5, dtype=np.float64):
        if eps <= 0:
            raise ValueError(f"LayerNorm eps must be positive, got {eps}")
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)
        self.eps = eps
        self.identity = False

    def __call__(self, x):
        if self.identity:
            return x
        return layer_norm(x, self)


def layer_norm(x, p):
    d = p.gain.shape[0]
    if x.shape[-1] != d:
        raise ad.ShapeError(f"layer_norm: last extent {x.shape[-1]} != {d}")
    return ad.layer_norm(x, p.gain, p.bias, p.eps)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng, dtype=np.float64):
        if heads < 1 or d % heads:
            raise ValueError(f"model dimension {d} is not divisible by head count {heads}")
        self.heads = heads
        self.q_proj = Linear(d, d, rng, dtype=dtype)
        self.k_proj = Linear(d, d, rng, dtype=dtype)
        self.v_proj = Linear(d, d, rng, dtype=dtype)
        self.out_proj = Linear(d, d, rng, dtype=dtype)

    def __call__(self, query, key_value, mask=None):
        return multi_head_attention(query, key_value, key_value, mask, self)


def multi_head_attention(q, k, v, mask, p):
    """Scaled dot-product attention over ``p.heads`` heads.

    Inputs are (batch, length, d) or (length, d). ``mask`` is an additive
    array of zeros and ``-inf`` broadcastable to (batch, heads, Lq, Lk).
    Every row of the mask must keep at least one finite entry.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (ad.reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, lq, d = q.shape
    lk = k.shape[1]
    h = p.heads
    if d % h:
        raise ValueError(f"model dimension {d} is not divisible by head count {h}")
    if k.shape[0] != b or v.shape[:2] != k.shape[:2]:
        raise ad.ShapeError(f"attention: query {q.shape}, key {k.shape}, value {v.shape} disagree")
    dh = d // h
    if mask is not None:
        mask = np.asarray(mask)
        try:
            ok = np.broadcast_shapes(mask.shape, (b, h, lq, lk)) == (b, h, lq, lk)
        except ValueError:
            ok = False
        if not ok:
            raise ad.ShapeError(f"attention: mask shape {mask.shape} does not fit logits shape {(b, h, lq, lk)}")

    qh = ad.transpose(ad.reshape(p.q_proj(q), (b, lq, h, dh)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(p.k_proj(k), (b, lk, h, dh)), (0, 2, 3, 1))
    vh = ad.transpose(ad.reshape(p.v_proj(v), (b, lk, h, dh)), (0, 2, 1, 3))
    logits = ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh))
    if mask is not None:
        logits = ad.add_constant(logits, mask)
    weights = ad.softmax(logits, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, vh), (0, 2, 1, 3)), (b, lq, d))
    out = p.out_proj(ctx)
    if squeeze:
        out = ad.reshape(out, (lq, d))
    return out


class FeedForward(Module):
    def __init__(self, d, d_ff, rng, dtype=np.float64):
        if d_ff < 1:
            raise ValueError(f"d_ff must be positive, got {d_ff}")
        self.inner = Linear(d, d_ff, rng, dtype=dtype)
        self.outer = Linear(d_ff, d, rng, dtype=dtype)

    def __call__(self, x):
        return ffn(x, self)


def ffn(x, p):
    d = p.inner.weight.shape[0]
    if x.shape[-1] != d:
        raise ad.ShapeError(f"ffn: last extent {x.shape[-1]} != {d}")
    return p.outer(ad.relu(p.inner(x)))


def sublayer_postln(x, sublayer, ln):
    """``LN(x + F(x))``."""
    return ln(ad.add(x, sublayer(x)))


def sublayer_preln(x, sublayer, ln):
    """``x + F(LN(x))``."""
    return ad.add(x, sublayer(ln(x)))


class _Layer(Module):
    def _setup_variant(self, variant, d, alpha, beta, dtype, n_norms):
        self.variant = Variant.parse(variant)
        if self.variant is Variant.B2T_NOLN:
            if alpha is None or beta is None:
                raise ValueError("B2T without LN needs both alpha and beta")
            for name, val in (("alpha", alpha), ("beta", beta)):
                if not 0.0 < val <= 1.0:
                    raise ValueError(f"{name} must lie in (0, 1], got {val}")
            self.alpha, self.beta = float(alpha), float(beta)
            self.norms = []
        else:
            if alpha is not None or beta is not None:
                raise ValueError(f"alpha/beta only apply to B2T without LN, not {self.variant.value}")
            self.alpha = self.beta = None
            self.norms = [LayerNorm(d, dtype=dtype) for _ in range(n_norms)]
        # test hook: False removes the bottom-to-top term from a B2T layer
        self.b2t_connection = self.variant is Variant.B2T

    def zero_sublayer_outputs(self):
        """Test hook: zero every sub-layer's output projection."""
        for m in self.modules():
            if isinstance(m, MultiHeadAttention):
                m.out_proj.zero_()
            elif isinstance(m, FeedForward):
                m.outer.zero_()

    def _sublayer(self, x, i, fn, name, drop, probe):
        """One residual block under the Post-LN / Pre-LN / LN-free wiring."""
        v = self.variant
        if v is Variant.PRELN:
            n = probe(f"{name}_ln_out", self.norms[i](x))
            return probe(f"{name}_residual", ad.add(x, drop(fn(n))))
        s = ad.add(x, drop(fn(x)))
        if v is Variant.B2T_NOLN:
            return probe(f"{name}_residual", s)
        s = probe(f"{name}_ln_in", s)
        return probe(f"{name}_ln_out", self.norms[i](s))

    def _ffn_block(self, x_inp, x_ffn, drop, probe):
        v = self.variant
        last = len(self.norms) - 1
        if v is Variant.PRELN:
            n = probe("ffn_ln_out", self.norms[last](x_ffn))
            return ad.add(x_ffn, drop(self.ffn(n)))
        s = ad.add(x_ffn, drop(self.ffn(x_ffn)))
        if v is Variant.B2T_NOLN:
            s = probe("ffn_residual", s)
            return ad.add(ad.scale(x_inp, self.alpha), ad.scale(s, self.beta))
        if self.b2t_connection:
            s = ad.add(x_inp, s)
        s = probe("final_ln_in", s)
        return probe("final_ln_out", self.norms[last](s))


class EncoderLayer(_Layer):
    """Self-attention then FFN, wired per ``variant``."""

    def __init__(self, d, heads, d_ff, variant, rng, alpha=None, beta=None, dtype=np.float64):
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.ffn = FeedForward(d, d_ff, rng, dtype=dtype)
        self._setup_variant(variant, d, alpha, beta, dtype, n_norms=2)

    def __call__(self, x, mask=None, drop=_identity, probe=_no_probe):
        x = probe("layer_input", x)
        h = self._sublayer(x, 0, lambda t: self.self_attn(t, t, mask), "self_attn", drop, probe)
        out = self._ffn_block(x, h, drop, probe)
        if self.variant in (Variant.PRELN, Variant.B2T_NOLN):
            out = probe("layer_output", out)
        return out


class DecoderLayer(_Layer):
    """Self-attention, encoder-decoder cross-attention, FFN."""

    def __init__(self, d, heads, d_ff, variant, rng, alpha=None, beta=None, dtype=np.float64):
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.ffn = FeedForward(d, d_ff, rng, dtype=dtype)
        self._setup_variant(variant, d, alpha, beta, dtype, n_norms=3)

    def __call__(self, x, memory, self_mask=None, cross_mask=None, drop=_identity, probe=_no_probe):
        x = probe("layer_input", x)
        h = self._sublayer(x, 0, lambda t: self.self_attn(t, t, self_mask), "self_attn", drop, probe)
        h = self._sublayer(h, 1, lambda t: self.cross_attn(t, memory, cross_mask), "cross_attn", drop, probe)
        out = self._ffn_block(x, h, drop, probe)
        if self.variant in (Variant.PRELN, Variant.B2T_NOLN):
            out = probe("layer_output", out)
        return out
