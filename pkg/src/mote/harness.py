"""End-to-end runs: artifact generation, plan execution with metrics,
oracle verification and solver benchmarks."""

import json
import statistics
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import editors, io, linalg, moe, tucker
from .spread import EditPlan, prepare_states, run_plan

EFFICACY_THRESHOLD = 0.1
GENERALIZATION_NOISE = 0.05


# -- metrics -------------------------------------------------------------------

def _success(pre, post, threshold):
    if pre == 0:
        return post <= 1e-12
    return post < threshold * pre


def efficacy_analogue(before, after, batch, threshold=EFFICACY_THRESHOLD):
    """Fraction of facts whose residual shrinks below `threshold` of its
    pre-edit norm, evaluated on the cached keys."""
    hits = [_success(np.linalg.norm(moe.compute_residual(before, f)),
                     np.linalg.norm(moe.compute_residual(after, f)), threshold)
            for f in batch.facts]
    return float(np.mean(hits))


def generalization_analogue(before, after, batch, rel_noise=GENERALIZATION_NOISE, seed=0,
                            threshold=EFFICACY_THRESHOLD):
    """Efficacy on keys perturbed by Gaussian noise of relative scale `rel_noise`.

    Stands in for paraphrase generalisation, which has no meaning for a
    bare linear map.
    """
    rng = np.random.default_rng(seed)
    hits = []
    for f in batch.facts:
        noise = rng.standard_normal(f.keys.shape)
        active = f.gating.weights > 0
        scale = np.linalg.norm(f.keys, axis=1, keepdims=True) / np.sqrt(f.keys.shape[1])
        keys = f.keys + rel_noise * scale * noise * active[:, None]
        g = moe.Fact(f.x, f.target_v, f.gating, keys)
        hits.append(_success(np.linalg.norm(moe.compute_residual(before, g)),
                             np.linalg.norm(moe.compute_residual(after, g)), threshold))
    return float(np.mean(hits))


def specificity_analogue(before, after, inputs):
    """Mean relative output drift ‖Δv‖ / ‖v‖ over preservation inputs (lower is better)."""
    drifts = []
    for x in np.atleast_2d(inputs):
        v0 = moe.moe_forward(before, x)
        v1 = moe.moe_forward(after, x)
        drifts.append(np.linalg.norm(v1 - v0) / max(np.linalg.norm(v0), 1e-300))
    return float(np.mean(drifts))


def routing_similarity(before, after, inputs, inputs_after=None):
    """Mean top-K overlap |S_before ∩ S_after| / K.

    Editing down-projections cannot move a layer's own routing, so callers
    pass the perturbed downstream hidden states as `inputs_after`.
    """
    inputs = np.atleast_2d(inputs)
    inputs_after = inputs if inputs_after is None else np.atleast_2d(inputs_after)
    if before.expert_embeddings.shape != after.expert_embeddings.shape:
        raise ValueError("layers have different router shapes")
    s0 = moe.route_many(before, inputs)
    s1 = moe.route_many(after, inputs_after)
    K = before.top_k
    return float(np.mean([len(set(a) & set(b)) / K for a, b in zip(s0, s1)]))


def downstream_states(layer, inputs):
    """Residual-stream analogue ``x + moe(x)`` fed to the next router."""
    inputs = np.atleast_2d(inputs)
    return inputs + np.stack([moe.moe_forward(layer, x) for x in inputs])


# -- generate ---------------------------------------------------------------------

@dataclass
class GenerateConfig:
    E: int = 4
    K: int = 2
    d_model: int = 16
    d_hidden: int = 8
    T: int = 10
    layers: list = field(default_factory=lambda: [3, 4, 5, 6, 7])
    residual_scale: float = 1.0
    lam: float = 0.1
    preservation_size: int = 200
    preservation_rank: int | None = 3
    preservation_noise: float = 0.05
    layout: str = "standard"
    activation: str = "silu"
    input_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("E", "K", "d_model", "d_hidden", "T"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K > self.E:
            raise ValueError(f"K={self.K} exceeds the number of experts E={self.E}")
        if not self.layers or any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError("layers must be a non-empty strictly increasing list")
        if self.layout not in moe.LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.activation not in moe.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.residual_scale < 0 or self.preservation_size < 0:
            raise ValueError("residual_scale and preservation_size must be non-negative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def build_artifacts(cfg):
    """In-memory (layers, batch, preservation inputs) for a config."""
    layers = {
        l: moe.random_layer(cfg.E, cfg.K, cfg.d_model, cfg.d_hidden, seed=cfg.seed * 1009 + l,
                            layout=cfg.layout, activation=cfg.activation)
        for l in cfg.layers
    }
    last = layers[cfg.layers[-1]]
    batch = moe.synthesize_batch(last, cfg.T, seed=cfg.seed * 7919 + 1, residual_scale=cfg.residual_scale,
                                 lam=cfg.lam, input_scale=cfg.input_scale)
    pres = moe.synthesize_preservation_inputs(cfg.d_model, cfg.preservation_size, seed=cfg.seed * 7919 + 2,
                                              subspace_dim=cfg.preservation_rank,
                                              noise=cfg.preservation_noise, input_scale=cfg.input_scale)
    return layers, batch, pres


def generate(cfg, out):
    out = Path(out)
    layers, batch, pres = build_artifacts(cfg)
    for l, layer in layers.items():
        moe.save_layer(layer, out / "layers" / str(l))
    moe.save_batch(batch, out / "batch")
    (out / "preservation").mkdir(parents=True, exist_ok=True)
    io.save_array(out / "preservation" / "inputs.mte", pres)
    io.save_manifest(out / "manifest.json", cfg.to_dict())
    return out


def load_artifacts(directory):
    d = Path(directory)
    m = io.load_manifest(d / "manifest.json")
    layers = {int(l): moe.load_layer(d / "layers" / str(l)) for l in m["layers"]}
    batch = moe.load_batch(d / "batch")
    pres_path = d / "preservation" / "inputs.mte"
    pres = io.load_array(pres_path) if pres_path.exists() else None
    dims = {(x.n_experts, x.d_model, x.d_hidden) for x in layers.values()}
    if len(dims) != 1:
        raise ValueError("artifact layers have inconsistent dimensions")
    E, d_model, d_hidden = dims.pop()
    if batch.keys.shape[1:] != (E, d_hidden) or batch.targets.shape[1] != d_model:
        raise ValueError("batch dimensions do not match the layers")
    return m, layers, batch, pres


# -- edit -----------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    layer_records: list
    metrics: dict
    timings_ns: dict
    solver_calls: int

    def records(self):
        rows = [{"kind": "layer", **r} for r in self.layer_records]
        rows.append({"kind": "summary", "config": self.config, "metrics": self.metrics,
                     "timings_ns": self.timings_ns, "solver_calls": self.solver_calls})
        return rows


def edit(plan, layers, batch, preservation_inputs=None, states=None):
    """Run `plan` and score it. Returns ``(RunReport, SpreadResult)``."""
    missing = [l for l in plan.layers if l not in layers]
    if missing:
        raise ValueError(f"plan layers {missing} not present in the artifacts")
    batch = moe.EditBatch(batch.facts, plan.lam)
    if states is None:
        states = prepare_states(plan, layers, preservation_inputs)
    result = run_plan(plan, states, batch)

    L_before, L_after = states[-1].layer, result.layers[-1]
    metrics = {
        "efficacy_analogue": efficacy_analogue(L_before, L_after, batch),
        "generalization_analogue": generalization_analogue(L_before, L_after, batch),
    }
    records = []
    drifts, rs = [], []
    for st, d, new in zip(states, result.deltas, result.layers):
        rec = {"layer": st.index, "delta_norm": d.norm()}
        if d.report is not None:
            rec["solver"] = d.report.record()
        if preservation_inputs is not None and len(preservation_inputs):
            rec["specificity_drift"] = specificity_analogue(st.layer, new, preservation_inputs)
            rec["routing_similarity"] = routing_similarity(
                st.layer, new, downstream_states(st.layer, preservation_inputs),
                downstream_states(new, preservation_inputs))
            drifts.append(rec["specificity_drift"])
            rs.append(rec["routing_similarity"])
        records.append(rec)
    if drifts:
        metrics["specificity_analogue"] = float(np.mean(drifts))
        metrics["routing_similarity"] = float(np.mean(rs))
    report = RunReport(plan.to_dict(), records, metrics, dict(result.timings_ns), result.solver_calls)
    return report, result


def write_run(out, report, result, states):
    out = Path(out)
    for st, new in zip(states, result.layers):
        moe.save_layer(new, out / "layers" / str(st.index))
    with open(out / "report.jsonl", "w") as fh:
        for row in report.records():
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- verify -----------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_deviation < self.tolerance)

    def record(self):
        return {"check": self.name, "max_deviation": self.max_deviation,
                "tolerance": self.tolerance, "passed": self.passed}


DEFAULT_VERIFY_SIZES = (
    {"E": 4, "K": 2, "d_model": 16, "d_hidden": 8, "T": 6},
    {"E": 8, "K": 2, "d_model": 12, "d_hidden": 16, "T": 20},
    {"E": 1, "K": 1, "d_model": 8, "d_hidden": 8, "T": 4},
)
DEFAULT_LAMBDAS = (1e-3, 0.1, 1.0, 10.0)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def verify(sizes=DEFAULT_VERIFY_SIZES, seeds=(0, 1), lambdas=DEFAULT_LAMBDAS):
    """Run the oracle identity suite; returns a list of :class:`Check`."""
    lambdas = tuple(float(l) for l in lambdas)
    if not lambdas or any(not l > 0 for l in lambdas):
        raise ValueError("every lambda must be positive")
    for s in sizes:
        if s["E"] * s["d_hidden"] > editors.ORACLE_MAX_SIZE:
            raise ValueError(f"size {s} exceeds the oracle guard E*d_hidden <= {editors.ORACLE_MAX_SIZE}")
        if not 1 <= s["K"] <= s["E"]:
            raise ValueError(f"size {s} has invalid K")
    dev = {k: 0.0 for k in ("push_through", "woodbury_vs_oracle", "tucker_core_sides",
                             "tucker_full_rank_vs_woodbury", "hosvd_vs_svd", "projector_idempotence")}
    for size, seed in product(sizes, seeds):
        rng = np.random.default_rng(seed)
        E, K, dm, dh, T = (size[k] for k in ("E", "K", "d_model", "d_hidden", "T"))
        layer = moe.random_layer(E, K, dm, dh, seed=seed)
        batch = moe.synthesize_batch(layer, T, seed=seed + 100)
        pres = moe.PreservationSet.from_inputs(
            layer, moe.synthesize_preservation_inputs(dm, 50, seed + 200, subspace_dim=2))
        proj = editors.build_projectors(pres, 0.02, dh)
        dev["projector_idempotence"] = max(
            dev["projector_idempotence"],
            max(np.linalg.norm(P @ P - P) for P in proj.P))
        full = tucker.hosvd(layer.down(), (E, dm, dh))
        for lam in lambdas:
            psi = editors.design_matrix(batch, proj)
            lhs, rhs = linalg.push_through(psi, lam)
            dev["push_through"] = max(dev["push_through"], _rel(lhs, rhs))
            wd = editors.solve_woodbury(batch, layer, proj, lam).delta
            if np.linalg.norm(wd) > 0:
                od = editors.solve_global_oracle(batch, layer, proj, lam).delta
                dev["woodbury_vs_oracle"] = max(dev["woodbury_vs_oracle"], _rel(wd, od))
            comp = editors.compress_batch(batch, layer, full, None)
            a = editors.solve_tucker_core(comp, lam, "kernel").flat
            b = editors.solve_tucker_core(comp, lam, "primal").flat
            dev["tucker_core_sides"] = max(dev["tucker_core_sides"], _rel(a, b))
            td = editors.solve_tucker(batch, layer, full, None, lam).delta
            wd0 = editors.solve_woodbury(batch, layer, None, lam).delta
            dev["tucker_full_rank_vs_woodbury"] = max(dev["tucker_full_rank_vs_woodbury"], _rel(td, wd0))
        w = rng.standard_normal((E + 1, dm, dh))
        ranks = (max(1, (E + 1) // 2), max(1, dm // 2), max(1, dh // 2))
        dev["hosvd_vs_svd"] = max(dev["hosvd_vs_svd"], abs(
            tucker.fit_error(w, tucker.hosvd(w, ranks)) - svd_reference_fit_error(w, ranks)) / np.linalg.norm(w))
    tol = {"push_through": 1e-9, "woodbury_vs_oracle": 1e-9, "tucker_core_sides": 1e-10,
           "tucker_full_rank_vs_woodbury": 1e-8, "hosvd_vs_svd": 1e-9, "projector_idempotence": 1e-8}
    return [Check(k, float(v), tol[k]) for k, v in dev.items()]


def svd_reference_fit_error(w, ranks):
    """Truncated HOSVD through a full SVD of every unfolding."""
    us = [np.linalg.svd(linalg.unfold(w, n), full_matrices=False)[0][:, :r] for n, r in enumerate(ranks)]
    core = linalg.multi_mode_product(w, [u.T for u in us])
    return float(np.linalg.norm(w - linalg.multi_mode_product(core, us)))


# -- bench ------------------------------------------------------------------------------

@dataclass
class BenchmarkGrid:
    E: list = field(default_factory=lambda: [8])
    d_hidden: list = field(default_factory=lambda: [16])
    T: list = field(default_factory=lambda: [16])
    n_layers: list = field(default_factory=lambda: [5])
    solvers: list = field(default_factory=lambda: ["woodbury", "tucker"])
    modes: list = field(default_factory=lambda: ["residual_spread", "update_spread"])
    repetitions: int = 3
    d_model: int = 32
    K: int = 2
    lam: float = 0.1
    null_space: bool = True
    whitening: str = "in"
    seed: int = 0

    def __post_init__(self):
        for name in ("E", "d_hidden", "T", "n_layers"):
            vals = getattr(self, name)
            if not vals or any(int(v) < 1 for v in vals):
                raise ValueError(f"grid axis {name} needs positive values")
        if self.repetitions < 3:
            raise ValueError("repetitions must be at least 3")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)


def bench(grid):
    """One row per (solver, spread mode, size) with median phase timings."""
    rows = []
    sizes = list(product(grid.E, grid.d_hidden, grid.T, grid.n_layers))
    with threadpool_limits(limits=1):
        for solver, mode, (E, dh, T, n) in product(grid.solvers, grid.modes, sizes):
            row = {"solver": solver, "spread_mode": mode, "E": E, "d_hidden": dh, "T": T,
                   "n_layers": n, "d_model": grid.d_model}
            try:
                plan = EditPlan(list(range(n)), solver, mode, grid.lam, grid.null_space, grid.whitening)
                if solver == "global_oracle" and E * dh > editors.ORACLE_MAX_SIZE:
                    raise ValueError("oracle size guard")
            except ValueError as exc:
                rows.append({**row, "status": "unsupported", "reason": str(exc)})
                continue
            cfg = GenerateConfig(E=E, K=min(grid.K, E), d_model=grid.d_model, d_hidden=dh, T=T,
                                 layers=plan.layers, lam=grid.lam, seed=grid.seed)
            layers, batch, pres = build_artifacts(cfg)
            states = prepare_states(plan, layers, pres)
            solve, assembly, calls = [], [], None
            for _ in range(grid.repetitions):
                res = run_plan(plan, states, batch)
                solve.append(res.timings_ns["solve"])
                assembly.append(res.timings_ns["assembly"])
                calls = res.solver_calls
            rows.append({**row, "status": "ok", "solver_calls": calls,
                         "solve_ns": int(statistics.median(solve)),
                         "assembly_ns": int(statistics.median(assembly)),
                         "repetitions": grid.repetitions})
    return rows


def format_table(rows):
    head = f"{'solver':<14}{'mode':<17}{'E':>5}{'d_hid':>7}{'T':>6}{'layers':>7}{'calls':>7}{'solve ms':>11}{'assembly ms':>13}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if r["status"] != "ok":
            tail = f"{'-':>7}{'unsupported':>24}"
        else:
            tail = f"{r['solver_calls']:>7}{r['solve_ns'] / 1e6:>11.3f}{r['assembly_ns'] / 1e6:>13.3f}"
        lines.append(f"{r['solver']:<14}{r['spread_mode']:<17}{r['E']:>5}{r['d_hidden']:>7}"
                     f"{r['T']:>6}{r['n_layers']:>7}" + tail)
    return "\n".join(lines)
