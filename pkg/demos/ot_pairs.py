"""
Mini-batch optimal transport pairs
==================================

Squared-distance assignment inside batches of 100 points. In 1-D the optimal
plan simply matches sorted lists, which makes a handy sanity check. The point
of coupling: straight lines cross less, and the spread of x1 - x0 shrinks.

Run:  python3 demos/ot_pairs.py
"""
import numpy as np

from hrflow import make_rng, minibatch_couple, preset, solve_ot

rng = make_rng(0)
a, b = rng.standard_normal(8), rng.standard_normal(8)
plan = solve_ot(a, b)
print("sigma        ", plan.sigma)
print("sorted match ", np.argsort(b)[np.argsort(np.argsort(a))])
print("cost", round(plan.cost, 6))

# identical points tie; the plan picks the lexicographically smallest permutation
print("ties ->", solve_ot(np.zeros(4), np.zeros(4)).sigma)

source, target = preset("1d-2n")
x0, x1 = source.draw(10_000, rng), target.draw(10_000, rng)
c0, c1 = minibatch_couple(x0, x1, 100)
print(f"var(x1 - x0): independent {np.var(x1 - x0):.3f}, OT batches of 100 {np.var(c1 - c0):.3f}")

# within one OT batch, count pairs of segments that cross
def crossings(p0, p1, m=100):
    d0 = p0[:m, 0, None] - p0[None, :m, 0]
    d1 = p1[:m, 0, None] - p1[None, :m, 0]
    return int(np.sum(d0 * d1 < 0) // 2)


print("crossing segments in the first batch:", crossings(x0, x1), "->", crossings(c0, c1))
