"""
One solve for five layers
=========================

Editing several layers usually means one solve per layer. Update spread
solves once at the last layer and rescales the core by 1/(L - l + 1) for
each earlier layer, reusing that layer's own factors. Here we time both.
"""

import statistics

from threadpoolctl import threadpool_limits

from mote import moe, spread
from mote.spread import EditPlan

layer_ids = [3, 4, 5, 6, 7]
layers = {l: moe.random_layer(E=32, K=4, d_model=64, d_hidden=64, seed=l) for l in layer_ids}
batch = moe.synthesize_batch(layers[7], T=50, seed=0, lam=0.1)
pres = moe.synthesize_preservation_inputs(64, 200, seed=1, subspace_dim=8, noise=0.05)

print("coefficients:", spread.spread_coefficients(layer_ids))

with threadpool_limits(limits=1):
    for mode in ("residual_spread", "update_spread"):
        plan = EditPlan(layer_ids, solver="tucker", spread_mode=mode, lam=0.1)
        states = spread.prepare_states(plan, layers, pres)
        runs = [spread.run_plan(plan, states, batch) for _ in range(5)]
        solve_ms = statistics.median(r.timings_ns["solve"] for r in runs) / 1e6
        print(f"{mode:16s} solver calls {runs[0].solver_calls}, solve phase {solve_ms:.2f} ms")
