"""
Shared structure across experts
===============================

Stacking the down-projections of all experts gives a 3-way tensor
(expert x model x hidden). Experts trained together share directions, so a
low multilinear rank Tucker model captures most of the tensor. We extract
factors with HOSVD, polish them with HOOI, and look at what whitening does.
"""

import numpy as np

from mote import harness, moe, tucker

layer = moe.random_layer(E=8, K=2, d_model=32, d_hidden=24, seed=3)
w = layer.down()
ranks = (4, 12, 8)

# HOSVD through Gram matrices, compared with a full SVD of each unfolding.
factors = tucker.hosvd(w, ranks)
print("HOSVD fit error:         ", tucker.fit_error(w, factors))
print("SVD-per-unfolding error: ", harness.svd_reference_fit_error(w, ranks))
print("relative fit error:      ", tucker.fit_error(w, factors) / np.linalg.norm(w))

# A few HOOI sweeps never make the fit worse.
_, errors = tucker.hooi_refine(w, factors, sweeps=4, return_errors=True)
print("HOOI fit error per sweep:", np.round(errors, 6))

# Whitening uses the second moment of the keys the layer actually sees,
# so the hidden factor favours directions carrying activation energy.
inputs = moe.synthesize_preservation_inputs(32, 300, seed=4, subspace_dim=4, noise=0.05)
pres = moe.PreservationSet.from_inputs(layer, inputs)
white = tucker.extract_factors(layer, ranks, tucker.whitening_for(layer, pres, "in"))
print("orthonormal in the whitened metric:", white.orthonormality_error() < 1e-8)
print("plain U_in orthonormal?", np.allclose(white.U_in.T @ white.U_in, np.eye(ranks[2])))
