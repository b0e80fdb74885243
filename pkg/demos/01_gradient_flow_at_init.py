"""
Gradient flow through deep stacks at initialization
====================================================

Build 18-layer encoder-decoder models for three wirings and measure, with one
backward pass, how large the loss gradient is at every decoder layer output.

Run with ``python demos/01_gradient_flow_at_init.py [seed]``.
"""

import sys

from lnlab import ModelConfig, TaskSpec, build_model, decay_fit, layer_gradient_norms
from lnlab.cli import probe_batch

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
batch = probe_batch(TaskSpec(seed=seed), 32)

# Same seed, same probe batch; only the placement of layer norm differs.
reports = {}
for variant in ("postln", "b2t", "preln"):
    cfg = ModelConfig(n_enc=18, n_dec=18, d=64, heads=4, d_ff=256, vocab=32, variant=variant, seed=seed)
    reports[variant] = layer_gradient_norms(build_model(cfg), batch)

print("decoder layer  " + "".join(f"{v:>10}" for v in reports))
for i in range(18):
    print(f"{i + 1:>13}  " + "".join(f"{reports[v].decoder[i]:>10.4f}" for v in reports))

# A negative rate means the norm shrinks on its way down to the first layer.
print()
for v, rep in reports.items():
    fit = decay_fit(rep.decoder)
    print(f"{v:>7}: first/last = {fit.ratio:8.4f}   per-layer factor = {fit.factor:.3f}")

###############################################################################
# Inside one Post-LN layer the gradient is largest just above each layer norm
# and smaller just below it.

rows = dict(reports["postln"].locations[("decoder", 18)])
print()
for ln in ("self_attn", "cross_attn", "final"):
    below, above = rows[f"{ln}_ln_in"], rows[f"{ln}_ln_out"]
    print(f"top decoder layer, {ln:>10} norm: in {below:.4f}  out {above:.4f}  ratio {below / above:.3f}")
