"""
Quantizing features onto a small grid
======================================

A feature tensor is scaled into [-1, 1], rounded onto K evenly spaced
levels, and sent as integer indices.  The receiver only needs K to turn the
indices back into values.
"""

import numpy as np

from splitquant import QuantizerConfig, Scaling, quantize, reconstruct

rng = np.random.default_rng(0)
x = rng.standard_normal((3, 8))

###############################################################################
# Four levels: the grid is {-1, -1/3, 1/3, 1}
q = quantize(x, QuantizerConfig(4))
print("indices:\n", q.block.indices.reshape(x.shape))
print("levels: ", np.unique(q.reconstructed))

###############################################################################
# Rounding never moves a value by more than half a step, 1/(K-1)
err = np.abs(reconstruct(q.block) - q.scaled).max()
print(f"worst rounding error {err:.4f} <= {1 / 3:.4f}")

###############################################################################
# The commitment loss measures how far the scaled values sit from the grid;
# training adds it to the task loss to pull the encoder onto the lattice.
print(f"commitment loss {q.commit_loss:.4f}")

###############################################################################
# Why linear scaling: tanh saturates on wide activations and piles every
# value onto the outer two levels.  Linear scaling does not care about scale.
wide = 30 * rng.standard_t(3, 10_000)
for mode in Scaling:
    counts = np.bincount(quantize(wide, QuantizerConfig(4, mode)).block.indices, minlength=4)
    print(f"{mode.value:>6}: level usage {counts}")
