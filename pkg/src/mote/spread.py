"""Multi-layer edit orchestration and layout-aware writeback.

Activations are cached once, at the last layer L of the plan. Two ways
of distributing the edit over layers ``L0..L``:

* residual spread: one solve per layer on residuals ``R_L / (L − ℓ + 1)``,
  reusing the last layer's design matrix;
* update spread: one solve at L, whose core (or update) is scaled by
  ``1 / (L − ℓ + 1)`` and re-expressed through each layer's factors.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import editors
from .editors import LayerDelta, NullSpaceProjectorSet
from .tucker import NO_WHITENING, WhiteningConfig, default_ranks, extract_factors, whitening_for

SOLVERS = ("global_oracle", "woodbury", "bcd", "tucker")
SPREAD_MODES = ("residual_spread", "update_spread")


@dataclass
class EditPlan:
    layers: list
    solver: str = "tucker"
    spread_mode: str = "update_spread"
    lam: float = 0.1
    null_space: bool = True
    whitening: str = "in"
    epsilon: float = 1e-5
    ranks: tuple | None = None
    hooi_sweeps: int = 2
    bcd_iterations: int = 4
    threshold: float = 0.02
    recompute_design: bool = False
    freeze_factors: bool = False

    def __post_init__(self):
        self.layers = [int(l) for l in self.layers]
        if self.ranks is not None:
            self.ranks = tuple(int(r) for r in self.ranks)
        self.validate()

    def validate(self):
        if not self.layers:
            raise ValueError("plan needs at least one layer")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError(f"plan layers must be strictly increasing, got {self.layers}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.spread_mode not in SPREAD_MODES:
            raise ValueError(f"unknown spread mode {self.spread_mode!r}")
        if self.spread_mode == "update_spread" and self.solver not in ("tucker", "woodbury"):
            raise ValueError("update_spread requires the tucker or woodbury solver")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        WhiteningConfig(self.whitening, self.epsilon)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lambda"] = d.pop("lam")
        d["ranks"] = None if self.ranks is None else list(self.ranks)
        return d


def spread_coefficients(layers):
    """``{ℓ: 1 / (L − ℓ + 1)}`` with L the last layer."""
    L = layers[-1]
    return {l: 1.0 / (L - l + 1) for l in layers}


def spread_residuals(r_last, layers):
    coeffs = spread_coefficients(layers)
    return {l: np.asarray(r_last) * c for l, c in coeffs.items()}


@dataclass
class LayerState:
    index: int
    layer: object  # MoELayer
    projectors: NullSpaceProjectorSet | None = None
    factors: object = None  # TuckerFactors


def prepare_states(plan, layers, preservation_inputs=None):
    """Build per-layer projectors and (for the Tucker solver) factors.

    `layers` maps layer index -> MoELayer and must contain every plan layer.
    """
    from .moe import PreservationSet

    states = []
    for l in plan.layers:
        layer = layers[l]
        if preservation_inputs is not None and len(preservation_inputs):
            pres = PreservationSet.from_inputs(layer, preservation_inputs)
        else:
            pres = PreservationSet.empty(layer.n_experts, layer.d_hidden)
        proj = editors.build_projectors(pres, plan.threshold, layer.d_hidden) if plan.null_space else None
        factors = None
        if plan.solver == "tucker":
            mode = plan.whitening if pres.sample_count else "none"
            wcfg = whitening_for(layer, pres, mode, plan.epsilon) if mode != "none" else NO_WHITENING
            ranks = plan.ranks or default_ranks(layer.n_experts, layer.d_model, layer.d_hidden)
            factors = extract_factors(layer, ranks, wcfg, plan.hooi_sweeps)
        states.append(LayerState(l, layer, proj, factors))
    return states


@dataclass
class SpreadResult:
    deltas: list
    layers: list  # edited MoELayers, same order as the plan
    solver_calls: int
    timings_ns: dict = field(default_factory=dict)


def _solve(plan, state, batch, residuals, psi=None):
    s = plan.solver
    if s == "global_oracle":
        return editors.solve_global_oracle(batch, state.layer, state.projectors, plan.lam, residuals)
    if s == "woodbury":
        return editors.solve_woodbury(batch, state.layer, state.projectors, plan.lam, residuals, psi)
    if s == "bcd":
        return editors.solve_bcd(batch, state.layer, state.projectors, plan.lam,
                                 plan.bcd_iterations, residuals)
    return editors.solve_tucker(batch, state.layer, state.factors, state.projectors, plan.lam, residuals)


def _solve_ns(report):
    t = report.timings_ns
    return sum(v for k, v in t.items() if k != "assembly")


def _check_states(plan, states):
    if [s.index for s in states] != plan.layers:
        raise ValueError("layer states do not match the plan's layers")


def run_residual_spread(plan, states, batch):
    _check_states(plan, states)
    R_L = batch.residuals(states[-1].layer)
    scaled = spread_residuals(R_L, plan.layers)
    deltas, calls, solve_ns, assembly_ns = [], 0, 0, 0
    for st in states:
        b = batch.recached(st.layer) if plan.recompute_design else batch
        d = _solve(plan, st, b, scaled[st.index])
        calls += 1
        solve_ns += _solve_ns(d.report)
        assembly_ns += d.report.timings_ns.get("assembly", 0)
        deltas.append(d)
    layers = [writeback(st.layer, d) for st, d in zip(states, deltas)]
    return SpreadResult(deltas, layers, calls, {"solve": solve_ns, "assembly": assembly_ns})


def run_update_spread(plan, states, batch):
    _check_states(plan, states)
    if plan.solver not in ("tucker", "woodbury"):
        raise ValueError("update_spread requires the tucker or woodbury solver")
    last = states[-1]
    top = _solve(plan, last, batch, None)
    solve_ns = _solve_ns(top.report)
    coeffs = spread_coefficients(plan.layers)
    deltas = []
    t0 = time.perf_counter_ns()
    for st in states:
        c = coeffs[st.index]
        if st is last:
            deltas.append(top)
            continue
        if plan.solver == "tucker":
            core = top.core.scaled(c)
            delta = editors.reconstruct_delta(core, st.factors, st.projectors)
        else:
            core = None
            delta = top.delta * c
            if st.projectors is not None:
                delta = delta @ st.projectors.P
        rep = replace(top.report, timings_ns={}, objective_before=None, objective_after=None)
        deltas.append(LayerDelta(delta, rep, core))
    assembly_ns = time.perf_counter_ns() - t0 + top.report.timings_ns.get("assembly", 0)
    layers = [writeback(st.layer, d) for st, d in zip(states, deltas)]
    return SpreadResult(deltas, layers, 1, {"solve": solve_ns, "assembly": assembly_ns})


def run_plan(plan, states, batch):
    if plan.spread_mode == "update_spread":
        return run_update_spread(plan, states, batch)
    return run_residual_spread(plan, states, batch)


def writeback(layer, delta):
    """Add the update to the layer's down-projections, honouring its layout."""
    d = delta.delta if isinstance(delta, LayerDelta) else np.asarray(delta, dtype=np.float64)
    expected = (layer.n_experts, layer.d_model, layer.d_hidden)
    if d.shape != expected:
        raise ValueError(f"delta of shape {d.shape} does not fit layer {expected}")
    if layer.layout == "standard":
        new = layer.down_w + d
    else:
        new = layer.down_w + d.transpose(0, 2, 1)
    return replace(layer, down_w=np.ascontiguousarray(new))


def run_sequential(plan, layers, batches, preservation_inputs=None):
    """Apply several batches one after another to the same layer stack.

    Projectors are rebuilt for every batch; Tucker factors are re-extracted
    from the edited weights unless ``plan.freeze_factors`` is set. Each
    batch's cached activations are refreshed against the current last layer.
    """
    layers = dict(layers)
    results, states = [], None
    for batch in batches:
        fresh = prepare_states(plan, layers, preservation_inputs)
        if states is not None and plan.freeze_factors:
            for new, old in zip(fresh, states):
                new.factors = old.factors
        states = fresh
        b = batch.recached(states[-1].layer)
        res = run_plan(plan, states, b)
        for st, new in zip(states, res.layers):
            layers[st.index] = new
        results.append(res)
    return layers, results
