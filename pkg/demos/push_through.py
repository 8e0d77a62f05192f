"""
Trading a big inverse for a small one
=====================================

The ridge edit of an MoE layer needs the inverse of an (E*d_hidden)-sized
matrix. The push-through identity swaps it for a T x T inverse, where T is
the number of facts. Here we check the identity numerically and then watch
both solvers agree on a real edit.
"""

import time

import numpy as np

from mote import editors, linalg, moe

rng = np.random.default_rng(0)

# A tall design matrix: 256 rows (stacked expert keys), 12 columns (facts).
psi = rng.standard_normal((256, 12))
lhs, rhs = linalg.push_through(psi, lam=0.1)
print("push-through deviation:", np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))

# Now an actual layer: 16 experts of width 32 gives a 512 x 512 system
# for the reference solver, against 16 x 16 for the reduced one.
layer = moe.random_layer(E=16, K=2, d_model=32, d_hidden=32, seed=1)
batch = moe.synthesize_batch(layer, T=16, seed=2, lam=0.1)

t0 = time.perf_counter()
reference = editors.solve_global_oracle(batch, layer)
t1 = time.perf_counter()
reduced = editors.solve_woodbury(batch, layer)
t2 = time.perf_counter()

gap = np.linalg.norm(reduced.delta - reference.delta) / np.linalg.norm(reference.delta)
print(f"oracle  {1e3 * (t1 - t0):7.2f} ms")
print(f"reduced {1e3 * (t2 - t1):7.2f} ms")
print("relative difference of the two updates:", gap)

# Both minimise the same objective, so the memorisation error drops the same way.
print("objective before:", reduced.report.objective_before)
print("objective after: ", reduced.report.objective_after)
