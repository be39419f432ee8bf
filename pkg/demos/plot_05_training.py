"""
Training through the rounding step
==================================

Rounding has zero gradient almost everywhere.  The straight-through
estimator rounds on the way forward and passes the gradient through
unchanged on the way back, which is enough to train a small autoencoder
with a 4-level bottleneck.
"""

import numpy as np

from splitquant import QuantizerConfig
from splitquant.training import (
    TrainConfig,
    gaussian_mixture,
    grad_check,
    init_autoencoder,
    init_mlp,
    train,
)

###############################################################################
# The backward pass agrees with finite differences on the smooth surrogate.
rng = np.random.default_rng(0)
enc, dec = init_mlp([4, 6, 3], rng=rng), init_mlp([3, 6, 4], rng=rng)
print(f"gradient check: {grad_check(enc, dec, QuantizerConfig(4)).max_rel_error:.2e}")

###############################################################################
# Four Gaussian clusters on a plane in 4-D, squeezed through two
# 4-level codes.
x = gaussian_mixture(512, seed=0)
enc, dec = init_autoencoder(4, 2, seed=0)
cfg = TrainConfig(QuantizerConfig(4), learning_rate=0.1, epochs=50)
q = train(x, cfg, enc, dec)
u = train(x, TrainConfig(QuantizerConfig(4), learning_rate=0.1, epochs=200), enc, dec, quantized=False)

for h in q.history[::10]:
    print(f"epoch {h['epoch']:3d}  loss {h['loss']:.4f}  commit {h['commit']:.4f}")
print(f"quantized task loss {q.history[-1]['task']:.4f} "
      f"vs unquantized {u.history[-1]['task']:.4f}")
