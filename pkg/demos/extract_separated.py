"""
Extracting a small ReLU network from queries
============================================

A target network is hidden behind a query oracle. We walk one Gaussian line,
read off the affine pieces, turn pairs of pieces into candidate neurons and
finish with a norm-constrained regression over those candidates.
"""

import numpy as np

from reluextract import (ExtractionParams, InProcessOracle, RegressionConfig, generate_target,
                         get_neurons, l2_distance_mc, learn_from_queries, schedule)

# a well-separated target: 4 neurons in 8 dimensions
target = generate_target("random-separated", d=8, k=4, R=2.0, B=2.0, seed=3)
print(target)

# the learner only sees this object
oracle = InProcessOracle(target)

###############################################################################
# The schedule fixes the grid. ``r`` is the interval length, ``tau`` the
# half-length of the searched segment and ``m`` the number of intervals.
# Shrinking the grid constant here keeps the demo fast.
p = ExtractionParams(epsilon=0.05, delta=0.1, k=4, R=2.0, B=2.0, c_r=2e9)
s = schedule(p, 8)
print(f"r = {s.r:.4f}, tau = {s.tau:.1f}, m = {s.m}")

###############################################################################
# Harvest candidates. Each true neuron should show up, up to sign.
cands, rep = get_neurons(oracle, p, seed=0)
print(f"{len(cands)} candidates from {rep.pieces} pieces, {rep.queries} queries")
for w, b in zip(target.weights, target.biases):
    print(f"  neuron with bias {b:+.3f}: match error {cands.match_error(w, b):.1e}")

###############################################################################
# The full pipeline: harvest, then regress on fresh truncated Gaussian samples.
oracle = InProcessOracle(target)
model, lrep, cands = learn_from_queries(oracle, p, RegressionConfig(), seed=0)
loss, se = l2_distance_mc(target, model, 100_000, seed=1)
print(f"population loss {loss:.2e} +- {se:.1e} after {oracle.query_count} queries")
print(f"coefficient norm {lrep.coef_norm:.2f} (bound {lrep.W_bound:.2f})")

x = np.random.default_rng(2).standard_normal((3, 8))
print(np.column_stack([target(x), model(x)]))
