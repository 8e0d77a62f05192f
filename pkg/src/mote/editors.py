"""Closed-form and iterative solvers for a single MoE layer edit.

Every solver minimises the projected-key ridge objective

    Σ_f ‖r_f − Σ_j g_{f,j} Δ_j P_j k_{f,j}‖² + λ Σ_j ‖Δ_j‖²

and returns the update as an (E, d_model, d_hidden) tensor. The stacked
form ``Δ̂ = [Δ_1 ⋯ Δ_E]`` (d_model, E·d_hidden) is used internally.
"""

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg
from .tucker import CoreTensor, reconstruct

ORACLE_MAX_SIZE = 512


@dataclass
class NullSpaceProjectorSet:
    P: np.ndarray  # (E, d_hidden, d_hidden)
    threshold: float = 0.02
    sample_count: int = 0

    @classmethod
    def identity(cls, E, d_hidden):
        return cls(np.broadcast_to(np.eye(d_hidden), (E, d_hidden, d_hidden)).copy(), 0.0, 0)

    @property
    def n_experts(self):
        return self.P.shape[0]

    def project_keys(self, keys):
        """Apply P_j to the expert-j rows of a (..., E, d_hidden) key array."""
        return np.einsum("jab,...jb->...ja", self.P, keys)


def build_projectors(preservation, threshold=0.02, d_hidden=None):
    """Per-expert projectors onto the low-energy eigenspace of the
    preservation key second moment (relative eigenvalue threshold)."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if d_hidden is None:
        d_hidden = preservation.expert_keys[0].shape[0]
    Ps = []
    for k0 in preservation.expert_keys:
        m = k0.shape[1]
        if m == 0:
            Ps.append(np.eye(d_hidden))
            continue
        w, v = np.linalg.eigh(k0 @ k0.T / m)
        top = w[-1]
        if top <= 0:
            Ps.append(np.eye(d_hidden))
            continue
        free = v[:, w < threshold * top]
        Ps.append(free @ free.T)
    return NullSpaceProjectorSet(np.stack(Ps), threshold, preservation.sample_count)


@dataclass
class SolverReport:
    solver: str
    T: int
    E: int
    d_hidden: int
    lam: float
    ranks: tuple | None = None
    timings_ns: dict = field(default_factory=dict)
    objective_before: float | None = None
    objective_after: float | None = None

    def record(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["ranks"] is not None:
            d["ranks"] = list(d["ranks"])
        return d


@dataclass
class LayerDelta:
    delta: np.ndarray  # (E, d_model, d_hidden)
    report: SolverReport | None = None
    core: CoreTensor | None = None  # set by the Tucker solver

    def norm(self):
        return float(np.linalg.norm(self.delta))


@dataclass
class CompressedBatch:
    Phi: np.ndarray  # (T, r_e·r_in)
    Rtilde: np.ndarray  # (T, r_out)
    r_e: int
    r_in: int


class _Timer:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter_ns()
        yield
        self.timings[name] = self.timings.get(name, 0) + max(time.perf_counter_ns() - t0, 1)


# -- design matrices --------------------------------------------------------

def _projectors(projectors, E, d_hidden):
    if projectors is None:
        return NullSpaceProjectorSet.identity(E, d_hidden)
    if projectors.P.shape != (E, d_hidden, d_hidden):
        raise ValueError(f"projectors of shape {projectors.P.shape} do not cover {E} experts x {d_hidden}")
    return projectors


def build_design_vector(fact, projectors=None):
    """ψ_f: block j is g_{f,j} P_j k_{f,j}."""
    E, d_hidden = fact.keys.shape
    keys = _projectors(projectors, E, d_hidden).project_keys(fact.keys)
    return (fact.gating.weights[:, None] * keys).reshape(-1)


def weighted_keys(batch, projectors=None):
    """(T, E, d_hidden) array of g_{t,j} P_j k_{t,j}."""
    keys = batch.keys
    _, E, d_hidden = keys.shape
    keys = _projectors(projectors, E, d_hidden).project_keys(keys)
    return batch.gates[:, :, None] * keys


def design_matrix(batch, projectors=None):
    """Ψ of shape (E·d_hidden, T)."""
    wk = weighted_keys(batch, projectors)
    return wk.reshape(len(wk), -1).T


def stacked_to_tensor(stacked, E, d_hidden):
    d_model = stacked.shape[0]
    return np.ascontiguousarray(stacked.reshape(d_model, E, d_hidden).transpose(1, 0, 2))


def tensor_to_stacked(delta):
    E, d_model, d_hidden = delta.shape
    return delta.transpose(1, 0, 2).reshape(d_model, E * d_hidden)


def _residuals(batch, layer, residuals):
    return batch.residuals(layer) if residuals is None else np.asarray(residuals, dtype=np.float64)


def _lam(batch, lam):
    lam = batch.lam if lam is None else lam
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return lam


# -- objective ---------------------------------------------------------------

def objective_value(batch, layer, delta, projectors=None, lam=None, preservation=None, residuals=None):
    """Memorisation over the batch + optional preservation + ridge.

    Keys enter Δ through their projections P_j k. The preservation term
    uses the gated form when the set carries gates, otherwise a plain
    per-expert sum ``Σ_j ‖Δ_j P_j K0_j‖²``.
    """
    lam = _lam(batch, lam)
    delta = np.asarray(delta, dtype=np.float64)
    E, _, d_hidden = delta.shape
    P = _projectors(projectors, E, d_hidden)
    R = _residuals(batch, layer, residuals)
    pred = tensor_to_stacked(delta) @ design_matrix(batch, P)
    value = np.sum((R - pred) ** 2) + lam * np.sum(delta**2)
    if preservation is not None:
        if preservation.gates is not None:
            wk = preservation.gates[:, :, None] * P.project_keys(preservation.keys)
            value += np.sum((tensor_to_stacked(delta) @ wk.reshape(len(wk), -1).T) ** 2)
        else:
            for j, k0 in enumerate(preservation.expert_keys):
                value += np.sum((delta[j] @ P.P[j] @ k0) ** 2)
    return float(value)


def _finish(name, batch, layer, lam, timer, delta, projectors, R, ranks=None, core=None):
    rep = SolverReport(name, len(batch), layer.n_experts, layer.d_hidden, lam, ranks,
                       dict(timer.timings))
    rep.objective_before = float(np.sum(R**2))
    rep.objective_after = objective_value(batch, layer, delta, projectors, lam, residuals=R)
    return LayerDelta(delta, rep, core)


# -- dense baseline ------------------------------------------------------------

def solve_dense_memit(w_down, k1, v1, k0, lam):
    """Dense-FFN edit ``(V1 − W K1) K1ᵀ (K0 K0ᵀ + K1 K1ᵀ + λI)⁻¹``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    w_down, k1, v1 = (np.asarray(a, dtype=np.float64) for a in (w_down, k1, v1))
    d_hidden = w_down.shape[1]
    k0 = np.zeros((d_hidden, 0)) if k0 is None else np.asarray(k0, dtype=np.float64)
    if k1.shape[0] != d_hidden or k0.shape[0] != d_hidden or v1.shape != (w_down.shape[0], k1.shape[1]):
        raise ValueError("inconsistent dense edit dimensions")
    a = k0 @ k0.T + k1 @ k1.T + lam * np.eye(d_hidden)
    rhs = (v1 - w_down @ k1) @ k1.T
    return linalg.solve_spd(a, rhs.T).T


# -- MoE solvers ---------------------------------------------------------------

def solve_global_oracle(batch, layer, projectors=None, lam=None, residuals=None):
    """Reference solve with the (E·d_hidden)-sized inverse, no push-through."""
    lam = _lam(batch, lam)
    E, d_hidden = layer.n_experts, layer.d_hidden
    n = E * d_hidden
    if n > ORACLE_MAX_SIZE:
        raise ValueError(f"global oracle limited to E*d_hidden <= {ORACLE_MAX_SIZE}, got {n}")
    timer = _Timer()
    R = _residuals(batch, layer, residuals)
    with timer.phase("kernel"):
        psi = design_matrix(batch, projectors)
        a = psi @ psi.T + lam * np.eye(n)
    with timer.phase("factor"):
        factor = linalg.cho_factor(a)
    with timer.phase("assembly"):
        stacked = linalg.cho_solve(factor, psi @ R.T).T
    return _finish("global_oracle", batch, layer, lam, timer,
                   stacked_to_tensor(stacked, E, d_hidden), projectors, R)


def solve_woodbury(batch, layer, projectors=None, lam=None, residuals=None, psi=None):
    """``Δ̂ = R (ΨᵀΨ + λI_T)⁻¹ Ψᵀ``: a single T×T factorization."""
    lam = _lam(batch, lam)
    E, d_hidden = layer.n_experts, layer.d_hidden
    timer = _Timer()
    R = _residuals(batch, layer, residuals)
    with timer.phase("kernel"):
        if psi is None:
            psi = design_matrix(batch, projectors)
        kernel = psi.T @ psi + lam * np.eye(psi.shape[1])
    with timer.phase("factor"):
        factor = linalg.cho_factor(kernel)
    with timer.phase("assembly"):
        coef = linalg.cho_solve(factor, R.T)  # (T, d_model)
        stacked = (psi @ coef).T
    return _finish("woodbury", batch, layer, lam, timer,
                   stacked_to_tensor(stacked, E, d_hidden), projectors, R)


def solve_bcd(batch, layer, projectors=None, lam=None, iterations=4, residuals=None, trace=None):
    """Block coordinate descent over experts in ascending index order.

    Each block step solves the expert-j ridge subproblem exactly on the
    residual net of the other experts. If `trace` is a list, the objective
    after every block update is appended to it (the first entry is the
    objective at Δ = 0).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    lam = _lam(batch, lam)
    E, d_model, d_hidden = layer.n_experts, layer.d_model, layer.d_hidden
    timer = _Timer()
    R = _residuals(batch, layer, residuals)
    with timer.phase("kernel"):
        wk = weighted_keys(batch, projectors)  # (T, E, d_hidden)
        A = [wk[:, j, :].T for j in range(E)]  # d_hidden x T
        active = [bool(np.any(a)) for a in A]
    with timer.phase("factor"):
        factors = [linalg.cho_factor(a @ a.T + lam * np.eye(d_hidden)) if act else None
                   for a, act in zip(A, active)]
    delta = np.zeros((E, d_model, d_hidden))
    contrib = np.zeros((E, d_model, len(batch)))

    def obj():
        return float(np.sum((R - contrib.sum(0)) ** 2) + lam * np.sum(delta**2))

    if trace is not None:
        trace.append(obj())
    with timer.phase("sweeps"):
        for _ in range(iterations):
            for j in range(E):
                if active[j]:
                    target = R - (contrib.sum(0) - contrib[j])
                    delta[j] = linalg.cho_solve(factors[j], A[j] @ target.T).T
                    contrib[j] = delta[j] @ A[j]
                if trace is not None:
                    trace.append(obj())
    return _finish("bcd", batch, layer, lam, timer, delta, projectors, R)


# -- Tucker-core solver ---------------------------------------------------------

def compress_batch(batch, layer, factors, projectors=None, residuals=None):
    """Φ (T, r_e·r_in) and R̃ (T, r_out) for the core ridge problem."""
    E, d_model, d_hidden = layer.n_experts, layer.d_model, layer.d_hidden
    if factors.dims != (E, d_model, d_hidden):
        raise ValueError(f"factors with dims {factors.dims} do not match layer {(E, d_model, d_hidden)}")
    R = _residuals(batch, layer, residuals)
    keys = _projectors(projectors, E, d_hidden).project_keys(batch.keys)
    c = keys @ factors.U_in  # (T, E, r_in)
    phi = np.einsum("tj,ja,tji->tai", batch.gates, factors.U_e, c)
    T, r_e, r_in = phi.shape
    return CompressedBatch(phi.reshape(T, r_e * r_in), R.T @ factors.U_out, r_e, r_in)


def solve_tucker_core(compressed, lam, side="auto"):
    """Ridge solve for G_flat on the cheaper side of the push-through.

    ``side`` is ``"kernel"`` (T×T), ``"primal"`` ((r_e·r_in)² system) or
    ``"auto"``, which picks the T×T side when T <= r_e·r_in.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    Phi, Rt = compressed.Phi, compressed.Rtilde
    T, n = Phi.shape
    if side == "auto":
        side = "kernel" if T <= n else "primal"
    if side == "kernel":
        flat = linalg.solve_spd(Phi @ Phi.T + lam * np.eye(T), Rt).T @ Phi
    elif side == "primal":
        flat = linalg.solve_spd(Phi.T @ Phi + lam * np.eye(n), Phi.T @ Rt).T
    else:
        raise ValueError(f"unknown side {side!r}")
    return CoreTensor.from_flat(flat, compressed.r_e, compressed.r_in)


def reconstruct_delta(core, factors, projectors=None):
    """Slab j = U_out (Σ_a U_e[j,a] G_a) U_inᵀ P_j."""
    raw = reconstruct(core, factors)
    if projectors is None:
        return raw
    E, _, d_hidden = raw.shape
    return raw @ _projectors(projectors, E, d_hidden).P


def solve_tucker(batch, layer, factors, projectors=None, lam=None, residuals=None):
    lam = _lam(batch, lam)
    timer = _Timer()
    R = _residuals(batch, layer, residuals)
    with timer.phase("compress"):
        comp = compress_batch(batch, layer, factors, projectors, R)
    with timer.phase("solve"):
        core = solve_tucker_core(comp, lam)
    with timer.phase("assembly"):
        delta = reconstruct_delta(core, factors, projectors)
    return _finish("tucker", batch, layer, lam, timer, delta, projectors, R, factors.ranks, core)
