"""
Editing in the core
===================

With fixed Tucker factors, the edit becomes a small ridge regression on the
core tensor. At full ranks it reproduces the exact solution; at lower ranks
it trades some fit for an update confined to the experts' shared subspaces.
"""

import numpy as np

from mote import editors, harness, moe, tucker

layer = moe.random_layer(E=4, K=2, d_model=16, d_hidden=16, seed=5)
batch = moe.synthesize_batch(layer, T=8, seed=6, input_scale=3.0, lam=1e-6)

exact = editors.solve_woodbury(batch, layer)

for r in (4, 8, 12, 16):
    factors = tucker.hosvd(layer.down(), (4, r, r))
    out = editors.solve_tucker(batch, layer, factors)
    edited = layer.with_down(layer.down() + out.delta)
    gap = np.linalg.norm(out.delta - exact.delta) / np.linalg.norm(exact.delta)
    eff = harness.efficacy_analogue(layer, edited, batch)
    print(f"ranks (4,{r:2d},{r:2d}): efficacy {eff:.2f}, distance to exact update {gap:.2e}")

# The core problem picks whichever side of the push-through is smaller.
comp = editors.compress_batch(batch, layer, tucker.hosvd(layer.down(), (4, 8, 8)))
print("Phi shape:", comp.Phi.shape, "-> solves the", "T x T" if len(batch) <= comp.Phi.shape[1] else "primal", "side")
