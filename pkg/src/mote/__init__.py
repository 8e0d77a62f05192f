"""Closed-form knowledge editing for Mixture-of-Experts layers.

Woodbury-reduced ridge solves, Tucker-structured core solves over HOSVD
factors, null-space-projected writeback and multi-layer update spreading
on synthetic MoE layers.
"""

from .editors import (CompressedBatch, LayerDelta, NullSpaceProjectorSet, build_projectors,
                      compress_batch, objective_value, reconstruct_delta, solve_bcd,
                      solve_dense_memit, solve_global_oracle, solve_tucker, solve_tucker_core,
                      solve_woodbury)
from .linalg import mode_product, push_through, refold, solve_spd, top_eig_sym, unfold
from .moe import (EditBatch, Fact, GatingResult, MoELayer, PreservationSet, compute_residual,
                  expert_key, moe_forward, random_layer, route, synthesize_batch)
from .spread import (EditPlan, run_residual_spread, run_update_spread, spread_coefficients,
                     spread_residuals, writeback)
from .tucker import (CoreTensor, TuckerFactors, WhiteningConfig, compute_core, hooi_refine, hosvd,
                     whiten_tensor)

__version__ = "0.1.0"
