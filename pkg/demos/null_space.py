"""
Keeping what should not move
============================

Projecting keys onto the null space of preserved activations makes the
update blind to them. We edit the same layer with and without the
projector and compare how much the outputs on preserved inputs drift.
"""

import numpy as np

from mote import harness, spread
from mote.spread import EditPlan

cfg = harness.GenerateConfig(E=4, K=2, d_model=16, d_hidden=16, T=6, layers=[0],
                             preservation_rank=3, preservation_noise=0.0, seed=7)
layers, batch, pres_inputs = harness.build_artifacts(cfg)

for null_space in (True, False):
    plan = EditPlan([0], solver="woodbury", spread_mode="residual_spread", lam=0.1,
                    null_space=null_space)
    report, _ = harness.edit(plan, layers, batch, pres_inputs)
    m = report.metrics
    print(f"null space {'on ' if null_space else 'off'}: efficacy {m['efficacy_analogue']:.2f}, "
          f"preservation drift {m['specificity_analogue']:.2e}, routing similarity {m['routing_similarity']:.3f}")

# The projectors themselves: symmetric, idempotent, and killing preserved keys.
state = spread.prepare_states(EditPlan([0]), layers, pres_inputs)[0]
P = state.projectors.P
print("max |P^2 - P|:", max(np.abs(p @ p - p).max() for p in P))
print("rank of each projector:", [int(round(np.trace(p))) for p in P])
