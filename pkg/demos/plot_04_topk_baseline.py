"""
The top-k baseline
==================

The comparison method keeps the k largest-magnitude entries of each vector,
each as a 16-bit value plus its index.  With a small probability a slot goes
to a random other entry instead.
"""

import numpy as np

from splitquant.baseline import densify, topk_sparsify
from splitquant.splitnet import Discrete, TopKMethod, benchmark, benchmark_csv

v = np.array([0.1, -5.0, 3.0, 0.2])
s = topk_sparsify(v, 2)
print("kept", s.indices, "->", densify(s))

###############################################################################
# Same nominal 8x budget, two ways to spend it.  Top-k also pays for the
# indices, so its real wire ratio is lower.
x = np.random.default_rng(0).standard_normal((729, 512))
rows = benchmark([Discrete(2), Discrete(4), TopKMethod(64, 0.1), Discrete(16)], x)
print(benchmark_csv(rows))
