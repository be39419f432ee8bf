"""
Choosing the bit width from the entropy
=======================================

Estimate the density of a batch of activations with a Gaussian kernel, take
its differential entropy in bits, and round up.  A batch near 1.8 bits needs
only two bits per element.
"""

import math

import numpy as np

from splitquant.entropy import recommend_bits

rng = np.random.default_rng(0)

###############################################################################
# Sanity check against a closed form: a standard normal has
# 0.5*log2(2*pi*e) ~ 2.047 bits.
r = recommend_bits(rng.standard_normal(20_000))
print(f"normal: estimated {r.entropy_bits:.4f}, exact {0.5 * math.log2(2 * math.pi * math.e):.4f}")

###############################################################################
# Narrower activations carry fewer bits: halving sigma removes one bit.
r = recommend_bits(0.5 * rng.standard_normal(20_000))
print(f"sigma=0.5: {r.entropy_bits:.4f} bits")

###############################################################################
# A batch whose entropy is about 1.81 bits
s = 2 ** (1.8077 - 0.5 * math.log2(2 * math.pi * math.e))
report = recommend_bits(s * rng.standard_normal(10_000))
print(report.to_text())
