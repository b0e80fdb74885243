"""
What the bottom-to-top connection adds
======================================

Two small experiments on a single decoder layer:

* with the extra connection removed, the layer is bit-for-bit a Post-LN layer;
* with sub-layers silenced, the connection passes the layer input straight to
  the last normalization, so its Jacobian contains an exact identity block.

Then a look at the scalar weights used when all normalizations are dropped.
"""

import numpy as np

from lnlab import Variant, alpha_coeff, autodiff as ad, beta_coeff
from lnlab.model import causal_mask
from lnlab.nn import DecoderLayer

d, heads, d_ff, n = 16, 4, 32, 5
rng = np.random.default_rng(0)
x_np = rng.normal(size=(2, n, d))
memory = ad.tensor(rng.normal(size=(2, 3, d)))
mask = causal_mask(n)[None, None]


def run(variant, ablate=False, silence=False):
    layer = DecoderLayer(d, heads, d_ff, variant, np.random.default_rng(1))
    if ablate:
        layer.b2t_connection = False
    if silence:
        layer.zero_sublayer_outputs()
        for norm in layer.norms[:-1]:
            norm.gain.data[:] = 0.0
    x = ad.tensor(x_np, requires_grad=True)
    captured = {}
    out = layer(x, memory, mask, probe=lambda label, t: captured.setdefault(label, t))
    return x, out, captured


_, b2t_ablated, _ = run(Variant.B2T, ablate=True)
_, postln, _ = run(Variant.POSTLN)
print("ablated B2T == Post-LN bitwise:", b2t_ablated.data.tobytes() == postln.data.tobytes())

x, _, captured = run(Variant.B2T, silence=True)
ad.backward(ad.tensor_sum(captured["final_ln_in"]))
print("d(sum of final-LN input)/dx is all ones:", np.array_equal(x.grad, np.ones_like(x_np)))

###############################################################################
# Without any normalization the layer output is ``alpha * x + beta * (...)``.
# ``alpha`` rises with depth until nine layers, then slowly falls; ``beta``
# shrinks with width.

print()
print(" N  alpha")
for layers in (1, 3, 6, 8, 9, 12, 18, 36, 100):
    print(f"{layers:>3}  {alpha_coeff(layers):.4f}")
print()
for width in (64, 256, 512, 1024):
    print(f"d={width:<5} beta={beta_coeff(width):.4f}")
