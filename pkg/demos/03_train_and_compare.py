"""
Training the four wirings on the copy task
==========================================

Trains 6L-6L models on a toy copy task and then compares how similar the
representations of the first layers are to the last layer. Takes a few
minutes per variant on one core; pass a step count to shorten it.

Run with ``python demos/03_train_and_compare.py [steps]``.
"""

import sys

import numpy as np

from lnlab import ModelConfig, TaskSpec, TrainConfig, layer_output_cosine_matrix, train_run
from lnlab.cli import probe_batch

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
task = TaskSpec(task="copy", seed=0)
hp = TrainConfig(steps=steps, eval_every=250, target_accuracy=0.995)

models = {}
for variant in ("postln", "preln", "b2t", "b2t_noln"):
    cfg = ModelConfig(n_enc=6, n_dec=6, d=64, heads=4, d_ff=256, vocab=32, max_len=32,
                      variant=variant, dropout=0.1, dtype="float32")
    run = train_run(cfg, task, hp=hp, log=None)
    models[variant] = run.model
    curve = " ".join(f"{a:.3f}" for a in run.valid_accuracy)
    print(f"{variant:>8}: {len(run.steps)} steps, validation accuracy {curve}")

###############################################################################
# Cosine similarity between layer outputs. Row 6 against columns 1-3 is the
# "how much does the top layer still look like the bottom" number.

np.set_printoptions(precision=2, suppress=True)
batch = probe_batch(task, 32)
for variant, model in models.items():
    sim = layer_output_cosine_matrix(model, batch, "decoder")
    print(f"\n{variant} decoder (final vs layers 1-3: {sim.lower_left_mean():.3f})")
    print(sim.matrix)
