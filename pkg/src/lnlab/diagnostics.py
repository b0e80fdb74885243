"""Gradient-flow and layer-similarity diagnostics.

All measurements run with dropout disabled. Gradient norms are Frobenius
norms of the loss gradient with respect to an activation over the whole probe
batch (batch x positions x d), not averaged per position.

Layers are numbered from 1 (shallowest) to N (deepest) throughout.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Trace, forward_loss

__all__ = [
    "GradientReport",
    "SimilarityMatrix",
    "DecayFit",
    "layer_gradient_norms",
    "location_gradient_norms",
    "layer_output_cosine_matrix",
    "decay_fit",
    "write_gradient_report",
    "write_similarity",
]

SIDES = ("encoder", "decoder")


@dataclass
class GradientReport:
    variant: str
    n_enc: int
    n_dec: int
    seed: int
    step: int
    encoder: list
    decoder: list
    # {(side, layer): [(probe label, norm), ...]} ordered shallow to deep
    locations: dict = field(default_factory=dict)
    loss: float = math.nan

    def layers(self, side):
        return self.encoder if side == "encoder" else self.decoder

    def to_dict(self):
        return {
            "variant": self.variant,
            "n_enc": self.n_enc,
            "n_dec": self.n_dec,
            "seed": self.seed,
            "step": self.step,
            "loss": self.loss,
            "encoder": list(self.encoder),
            "decoder": list(self.decoder),
            "locations": [
                {"side": side, "layer": layer, "probes": [{"label": lab, "norm": n} for lab, n in rows]}
                for (side, layer), rows in sorted(self.locations.items())
            ],
        }

    def csv_rows(self):
        for side in SIDES:
            for i, n in enumerate(self.layers(side), 1):
                yield [self.variant, self.seed, side, i, "layer", "", n]
        for (side, layer), rows in sorted(self.locations.items()):
            for label, n in rows:
                yield [self.variant, self.seed, side, layer, "probe", label, n]


REPORT_COLUMNS = ["variant", "seed", "side", "layer", "kind", "probe", "norm"]
SIMILARITY_COLUMNS = ["side", "i", "j", "cosine"]


@dataclass
class SimilarityMatrix:
    side: str
    variant: str
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        self.matrix = m

    def lower_left_mean(self, first=3):
        """Mean similarity between the final layer and layers 1..``first``."""
        k = min(first, self.matrix.shape[0] - 1)
        return float(self.matrix[-1, :k].mean())

    def to_dict(self):
        return {"side": self.side, "variant": self.variant, "matrix": self.matrix.tolist()}


@dataclass
class DecayFit:
    """Log-linear fit of gradient norm against depth.

    ``rate`` is the per-layer change of log-norm when moving one layer towards
    the input (the back-propagation direction); negative means gradients
    shrink on the way down. ``factor`` is ``exp(rate)``. ``ratio`` is the
    shallowest norm divided by the deepest.
    """

    rate: float
    factor: float
    ratio: float


def _check_norm(value, where):
    if not math.isfinite(value):
        raise ad.NonFiniteError(f"non-finite gradient at {where}")
    return value


def _grad_norm(t):
    if t.grad is None:
        return 0.0
    return float(np.sqrt(np.sum(np.square(t.grad, dtype=np.float64))))


def _traced_backward(model, batch):
    was = model.training
    model.eval()
    params = model.parameters()
    ad.zero_grad(params)
    trace = Trace(retain=True)
    try:
        loss, _ = forward_loss(model, batch, trace)
        ad.backward(loss)
    finally:
        ad.zero_grad(params)
        model.train(was)
    return trace, float(loss.data)


def layer_gradient_norms(model, batch, step=0):
    """Gradient norm at every encoder and decoder layer output, plus all probes."""
    trace, loss = _traced_backward(model, batch)
    cfg = model.cfg
    enc = [_check_norm(_grad_norm(t), f"encoder layer {i}") for i, t in enumerate(trace.encoder_outputs, 1)]
    dec = [_check_norm(_grad_norm(t), f"decoder layer {i}") for i, t in enumerate(trace.decoder_outputs, 1)]
    locations = {}
    for (side, layer), rows in trace.probes.items():
        locations[(side, layer)] = [
            (label, _check_norm(_grad_norm(t), f"{side} layer {layer} probe {label}")) for label, t in rows
        ]
    return GradientReport(cfg.variant.value, cfg.n_enc, cfg.n_dec, cfg.seed, step, enc, dec, locations, loss)


def location_gradient_norms(model, batch, side, layer_index):
    """``[(label, norm), ...]`` for the probes of one layer, shallowest first."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    n = model.cfg.n_enc if side == "encoder" else model.cfg.n_dec
    if not 1 <= layer_index <= n:
        raise IndexError(f"{side} layer index {layer_index} out of range 1..{n}")
    report = layer_gradient_norms(model, batch)
    return report.locations[(side, layer_index)]


def layer_output_cosine_matrix(model, batch, side):
    """Mean per-position cosine similarity between every pair of layer outputs.

    Pad positions are excluded.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    was = model.training
    model.eval()
    trace = Trace()
    try:
        with ad.no_grad():
            forward_loss(model, batch, trace)
    finally:
        model.train(was)
    outs = trace.encoder_outputs if side == "encoder" else trace.decoder_outputs
    mask = batch.source_mask if side == "encoder" else batch.target_mask
    vecs = np.stack([np.asarray(o.data, dtype=np.float64)[mask] for o in outs])
    norms = np.linalg.norm(vecs, axis=-1, keepdims=True)
    unit = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    m = np.einsum("ipd,jpd->ij", unit, unit) / unit.shape[1]
    m = np.clip(0.5 * (m + m.T), -1.0, 1.0)
    return SimilarityMatrix(side, model.cfg.variant.value, m)


def decay_fit(norms, order="shallow_first"):
    """Fit ``log(norm)`` linearly against depth.

    ``norms`` lists one value per layer, shallowest first by default; pass
    ``order="deep_first"`` for lists read from the top layer down.
    """
    arr = np.asarray(norms, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("decay_fit needs at least two norms")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("decay_fit needs positive finite norms")
    if order == "deep_first":
        arr = arr[::-1]
    elif order != "shallow_first":
        raise ValueError(f"order must be 'shallow_first' or 'deep_first', got {order!r}")
    depth = np.arange(1, arr.size + 1, dtype=np.float64)
    slope = np.polyfit(depth, np.log(arr), 1)[0]
    rate = -float(slope)
    return DecayFit(rate, math.exp(rate), float(arr[0] / arr[-1]))


# ---------------------------------------------------------------------------
# serialization


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def write_gradient_report(report, out_dir, stem):
    """Write ``<stem>.json`` and ``<stem>.csv``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
    jp.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    cp.write_text(_csv_text(REPORT_COLUMNS, report.csv_rows()))
    return jp, cp


def write_similarity(sims, out_dir, metadata=None):
    """Write one ``similarity_<side>.csv`` per matrix and a combined JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in sims:
        n = s.matrix.shape[0]
        rows = ([s.side, i + 1, j + 1, float(s.matrix[i, j])] for i in range(n) for j in range(n))
        p = out / f"similarity_{s.side}.csv"
        p.write_text(_csv_text(SIMILARITY_COLUMNS, rows))
        paths.append(p)
    jp = out / "similarity.json"
    jp.write_text(json.dumps({"metadata": metadata or {}, "matrices": [s.to_dict() for s in sims]}, indent=2) + "\n")
    paths.append(jp)
    return paths
