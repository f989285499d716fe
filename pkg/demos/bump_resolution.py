"""
A bump narrower than the grid
=============================

``relu(x - a) + relu(x - a - w) - relu(2x - 2a - w)`` is a tent of width ``w``
and height ``w / 2``. Query-based extraction can only see it if some grid
interval falls inside one of its two slopes, so its cost has to grow like
``1 / w``. We run the same pipeline on a wide bump and on a narrow one.
"""

from reluextract import ExtractionParams, InProcessOracle, learn_from_queries, schedule
from reluextract.harness import bump_network
from reluextract.network import gaussian_norm_mc, l2_distance_mc

p = ExtractionParams(epsilon=0.05, delta=0.1, k=3, R=2.0, B=1.0)
r = schedule(p, 1).r
print(f"grid interval r = {r:.4f}")

for factor in (10.0, 0.1):
    w = factor * r
    bump = bump_network(0.0, w)
    model, rep, cands = learn_from_queries(InProcessOracle(bump), p, seed=0)
    norm2, _ = gaussian_norm_mc(bump, 200_000, seed=1)
    loss, _ = l2_distance_mc(bump, model, 200_000, seed=1)
    # the interior neuron is the kink at the top of the tent
    err = cands.match_error([2.0], w)
    print(f"width {w:.4f}: {len(cands)} candidates, interior match error {err:.1e}, "
          f"loss / E[F^2] = {loss / norm2:.1e}")

###############################################################################
# The wide bump is recovered exactly. The narrow one falls between grid
# points: every interval sees F = 0 at its three queries, no piece has a
# nonzero gradient and the candidate set is empty. The fitted model is then
# the best affine function, which misses essentially all of the bump's mass.
