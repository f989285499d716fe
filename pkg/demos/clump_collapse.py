"""
Collapsing a clump of nearly parallel neurons
=============================================

Neurons that are (Delta, alpha)-close to a reference ``(v*, b*)`` can be
replaced by two neurons along ``+-v*``. The error shrinks with Delta.
"""

import numpy as np

from reluextract import ClosenessParams, collapse_clump, l2_distance_mc
from reluextract.geometry import clump_network
from reluextract.harness import random_clump

for Delta in (1e-1, 1e-2, 1e-3, 1e-4):
    # same seed at every level, so only the spread changes
    rng = np.random.default_rng(0)
    neurons, ref = random_clump(rng, 5, 4, 2.0, 2.0, Delta, Delta)
    c = collapse_clump(neurons, ref, ClosenessParams(Delta, Delta))
    loss, se = l2_distance_mc(clump_network(neurons), c.network, 100_000, seed=1)
    print(f"Delta = {Delta:.0e}: a+ = {c.a_plus:+.4f}, a- = {c.a_minus:+.4f}, "
          f"loss {loss:.2e} +- {se:.1e}")
