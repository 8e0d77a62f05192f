"""Tucker factors of the stacked down-projection tensor.

HOSVD via the Gram trick, HOOI refinement and multilinear whitening.
When whitening is active the factors are extracted in whitened geometry
and re-coloured, so they are orthonormal under the metric
``Σ + εI`` of their mode rather than the identity.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .linalg import (as_tensor3, fix_signs, mode_product, multi_mode_product,
                     refold, sym_sqrt, top_eig_sym, unfold)

WHITENING_MODES = ("none", "in", "out", "both")


@dataclass
class WhiteningConfig:
    mode: str = "in"
    epsilon: float = 1e-5
    cov_in: np.ndarray | None = None  # (d_hidden, d_hidden)
    cov_out: np.ndarray | None = None  # (d_model, d_model)

    def __post_init__(self):
        if self.mode not in WHITENING_MODES:
            raise ValueError(f"whitening mode must be one of {WHITENING_MODES}, got {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("whitening epsilon must be positive")

    @property
    def uses_in(self):
        return self.mode in ("in", "both")

    @property
    def uses_out(self):
        return self.mode in ("out", "both")

    def metric_in(self):
        if not self.uses_in:
            return None
        if self.cov_in is None:
            raise ValueError(f"whitening mode {self.mode!r} needs cov_in")
        return self.cov_in + self.epsilon * np.eye(len(self.cov_in))

    def metric_out(self):
        if not self.uses_out:
            return None
        if self.cov_out is None:
            raise ValueError(f"whitening mode {self.mode!r} needs cov_out")
        return self.cov_out + self.epsilon * np.eye(len(self.cov_out))


NO_WHITENING = WhiteningConfig(mode="none")


@dataclass
class TuckerFactors:
    U_e: np.ndarray
    U_out: np.ndarray
    U_in: np.ndarray
    # Σ + εI for whitened modes; None means Euclidean geometry
    metric_out: np.ndarray | None = None
    metric_in: np.ndarray | None = None
    whitening_mode: str = "none"
    epsilon: float | None = None

    @property
    def ranks(self):
        return (self.U_e.shape[1], self.U_out.shape[1], self.U_in.shape[1])

    @property
    def dims(self):
        return (self.U_e.shape[0], self.U_out.shape[0], self.U_in.shape[0])

    def duals(self):
        """Matrices ``D`` with ``Dᵀ U = I`` per mode (projection onto the core)."""
        d_out = self.U_out if self.metric_out is None else self.metric_out @ self.U_out
        d_in = self.U_in if self.metric_in is None else self.metric_in @ self.U_in
        return self.U_e, d_out, d_in

    def orthonormality_error(self):
        """Max over modes of ``‖Uᵀ M U − I‖_F`` in each mode's metric."""
        errs = []
        for u, d in zip((self.U_e, self.U_out, self.U_in), self.duals()):
            errs.append(np.linalg.norm(d.T @ u - np.eye(u.shape[1])))
        return max(errs)


@dataclass
class CoreTensor:
    g: np.ndarray  # (r_e, r_out, r_in)

    @property
    def flat(self):
        """``[G_1 ⋯ G_{r_e}]`` of shape (r_out, r_e·r_in), G_a = g[a]."""
        return unfold(self.g, 1)

    @classmethod
    def from_flat(cls, flat, r_e, r_in):
        flat = np.asarray(flat, dtype=np.float64)
        return cls(np.ascontiguousarray(refold(flat, 1, (r_e, flat.shape[0], r_in))))

    def scaled(self, c):
        return CoreTensor(self.g * c)


def default_ranks(E, d_model, d_hidden):
    return (min(E, 8), max(1, d_model // 2), max(1, d_hidden // 2))


def _check_ranks(shape, ranks):
    if len(ranks) != 3:
        raise ValueError("ranks must be a triple")
    for r, d in zip(ranks, shape):
        if not 1 <= r <= d:
            raise ValueError(f"rank {r} outside [1, {d}] for tensor of shape {shape}")


def whiten_tensor(w, whitening):
    """Whiten the hidden (axis 2) and/or model (axis 1) modes.

    Returns ``(whitened, recolor_in, recolor_out)``; re-colouring applies
    ``recolor_in`` on axis 2 and ``recolor_out`` on axis 1.
    """
    w = as_tensor3(w)
    _, d_model, d_hidden = w.shape
    recolor_in, recolor_out = np.eye(d_hidden), np.eye(d_model)
    out = w
    m_in, m_out = whitening.metric_in(), whitening.metric_out()
    if m_in is not None:
        if m_in.shape != (d_hidden, d_hidden):
            raise ValueError("cov_in does not match d_hidden")
        root = sym_sqrt(m_in)
        out = mode_product(out, root.T, 2)
        recolor_in = sym_sqrt(m_in, inverse=True)
    if m_out is not None:
        if m_out.shape != (d_model, d_model):
            raise ValueError("cov_out does not match d_model")
        root = sym_sqrt(m_out)
        out = mode_product(out, root.T, 1)
        recolor_out = sym_sqrt(m_out, inverse=True)
    return out, recolor_in, recolor_out


def recolor_tensor(t, recolor_in, recolor_out):
    return multi_mode_product(t, [None, recolor_out.T, recolor_in.T])


def gram_factor(t, mode, r):
    """Top-`r` left singular vectors of the mode unfolding, via its Gram matrix."""
    m = unfold(t, mode)
    return top_eig_sym(m @ m.T, r)[1]


def _recolor_factors(u_hat, whitening, recolor_in, recolor_out):
    U_e, U_out, U_in = u_hat
    U_out = fix_signs(recolor_out.T @ U_out)
    U_in = fix_signs(recolor_in.T @ U_in)
    return TuckerFactors(fix_signs(U_e), U_out, U_in,
                         metric_out=whitening.metric_out(), metric_in=whitening.metric_in(),
                         whitening_mode=whitening.mode,
                         epsilon=None if whitening.mode == "none" else whitening.epsilon)


def _whitened_factors(factors, whitening):
    """Map raw-space factors back into whitened geometry (orthonormal there)."""
    U_out, U_in = factors.U_out, factors.U_in
    if whitening.uses_out:
        U_out = sym_sqrt(whitening.metric_out()) @ U_out
    if whitening.uses_in:
        U_in = sym_sqrt(whitening.metric_in()) @ U_in
    return [factors.U_e, U_out, U_in]


def hosvd(w, ranks, whitening=NO_WHITENING):
    w = as_tensor3(w)
    _check_ranks(w.shape, ranks)
    wh, rin, rout = whiten_tensor(w, whitening)
    u_hat = [gram_factor(wh, n, r) for n, r in enumerate(ranks)]
    return _recolor_factors(u_hat, whitening, rin, rout)


def fit_error(w, factors):
    """``‖w − reconstruction‖_F`` with the core taken by projection."""
    return np.linalg.norm(w - reconstruct(compute_core(w, factors), factors))


def hooi_refine(w, factors, sweeps=2, whitening=NO_WHITENING, return_errors=False):
    """HOOI sweeps starting from `factors`.

    With ``return_errors`` the fit error (in whitened geometry) before the
    first sweep and after each sweep is returned alongside the factors.
    """
    w = as_tensor3(w)
    if sweeps == 0 and not return_errors:
        return factors
    wh, rin, rout = whiten_tensor(w, whitening)
    u = _whitened_factors(factors, whitening)
    ranks = factors.ranks

    def err(u):
        core = multi_mode_product(wh, [x.T for x in u])
        return np.linalg.norm(wh - multi_mode_product(core, u))

    errors = [err(u)]
    for _ in range(sweeps):
        for n in range(3):
            y = multi_mode_product(wh, [None if m == n else u[m].T for m in range(3)])
            u[n] = gram_factor(y, n, ranks[n])
        errors.append(err(u))
    out = factors if sweeps == 0 else _recolor_factors(u, whitening, rin, rout)
    return (out, errors) if return_errors else out


def compute_core(w, factors):
    w = as_tensor3(w)
    if w.shape != factors.dims:
        raise ValueError(f"tensor shape {w.shape} does not match factor dims {factors.dims}")
    return CoreTensor(multi_mode_product(w, [d.T for d in factors.duals()]))


def reconstruct(core, factors):
    g = core.g if isinstance(core, CoreTensor) else core
    return multi_mode_product(g, [factors.U_e, factors.U_out, factors.U_in])


# -- covariance estimates for whitening ------------------------------------

def input_covariance(preservation, d_hidden):
    """Per-expert key second moments averaged over experts with samples."""
    covs = [k @ k.T / k.shape[1] for k in preservation.expert_keys if k.shape[1] > 0]
    if not covs:
        return np.zeros((d_hidden, d_hidden))
    return np.mean(covs, axis=0)


def output_covariance(layer, inputs):
    from .moe import moe_forward

    vs = np.stack([moe_forward(layer, x) for x in np.atleast_2d(inputs)])
    return vs.T @ vs / len(vs)


def whitening_for(layer, preservation, mode="in", epsilon=1e-5):
    cov_in = cov_out = None
    if mode in ("in", "both"):
        cov_in = input_covariance(preservation, layer.d_hidden)
    if mode in ("out", "both"):
        if preservation.inputs is None:
            raise ValueError("out whitening needs preservation inputs")
        cov_out = output_covariance(layer, preservation.inputs)
    return WhiteningConfig(mode, epsilon, cov_in, cov_out)


def extract_factors(layer, ranks, whitening=NO_WHITENING, hooi_sweeps=2):
    w = layer.down()
    factors = hosvd(w, ranks, whitening)
    return hooi_refine(w, factors, hooi_sweeps, whitening)


def save_factors(factors, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save_array(d / "U_e.mte", factors.U_e)
    io.save_array(d / "U_out.mte", factors.U_out)
    io.save_array(d / "U_in.mte", factors.U_in)
    if factors.metric_out is not None:
        io.save_array(d / "metric_out.mte", factors.metric_out)
    if factors.metric_in is not None:
        io.save_array(d / "metric_in.mte", factors.metric_in)
    io.save_manifest(d / "manifest.json", {
        "ranks": list(factors.ranks), "whitening": factors.whitening_mode,
        "epsilon": factors.epsilon,
        "sign_convention": "largest-magnitude entry of each column positive",
    })


def load_factors(directory):
    d = Path(directory)
    m = io.load_manifest(d / "manifest.json")
    opt = lambda name: io.load_array(d / name) if (d / name).exists() else None
    f = TuckerFactors(io.load_array(d / "U_e.mte"), io.load_array(d / "U_out.mte"),
                      io.load_array(d / "U_in.mte"), opt("metric_out.mte"), opt("metric_in.mte"),
                      m["whitening"], m.get("epsilon"))
    if list(f.ranks) != m["ranks"]:
        raise io.FormatError("factor shapes disagree with manifest ranks")
    return f
