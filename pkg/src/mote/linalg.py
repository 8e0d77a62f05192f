"""Dense matrix/tensor primitives.

Tensors are plain 3-D float64 ndarrays in C order (first axis slowest).
Modes are numpy axes: 0 (expert), 1 (model / output), 2 (hidden / input).
"""

import numpy as np
import scipy.linalg


class NotSymmetricError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization fails."""


def as_tensor3(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor has non-finite entries")
    return t


def _check_mode(mode):
    if mode not in (0, 1, 2):
        raise ValueError(f"mode must be 0, 1 or 2, got {mode!r}")


def unfold(t, mode):
    """Mode-`mode` unfolding: rows indexed by that axis, columns by the
    remaining two axes in their original (C) order."""
    _check_mode(mode)
    t = np.asarray(t)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def refold(m, mode, shape):
    """Inverse of `unfold` for a tensor of the given full shape."""
    _check_mode(mode)
    shape = tuple(shape)
    rest = [d for i, d in enumerate(shape) if i != mode]
    m = np.asarray(m)
    if m.shape != (shape[mode], rest[0] * rest[1]):
        raise ValueError(f"matrix of shape {m.shape} cannot refold into {shape} along mode {mode}")
    return np.moveaxis(m.reshape([shape[mode]] + rest), 0, mode)


def mode_product(t, m, mode):
    """t ×_mode m, i.e. refold(m @ unfold(t, mode))."""
    _check_mode(mode)
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"mode-{mode} product needs a matrix with {t.shape[mode]} columns, got {m.shape}")
    shape = list(t.shape)
    shape[mode] = m.shape[0]
    return np.ascontiguousarray(refold(m @ unfold(t, mode), mode, shape))


def multi_mode_product(t, matrices):
    """Apply one matrix per mode; ``None`` skips that mode."""
    for mode, m in enumerate(matrices):
        if m is not None:
            t = mode_product(t, m, mode)
    return t


def check_symmetric(g, rtol=1e-10):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {g.shape}")
    scale = max(np.linalg.norm(g), 1.0)
    if np.linalg.norm(g - g.T) > rtol * scale:
        raise NotSymmetricError("matrix is not symmetric")
    return g


def top_eig_sym(g, r):
    """Largest `r` eigenpairs of a symmetric matrix.

    Returns ``(values, vectors)`` with values sorted non-increasing and
    orthonormal eigenvectors as columns.
    """
    g = check_symmetric(g)
    n = g.shape[0]
    if not 0 <= r <= n:
        raise ValueError(f"requested {r} eigenpairs of a {n}x{n} matrix")
    if r == 0:
        return np.zeros(0), np.zeros((n, 0))
    g = 0.5 * (g + g.T)
    values, vectors = scipy.linalg.eigh(g, subset_by_index=[n - r, n - 1])
    return values[::-1].copy(), np.ascontiguousarray(vectors[:, ::-1])


def fix_signs(u):
    """Flip columns so each column's largest-magnitude entry is positive."""
    u = np.array(u, dtype=np.float64, copy=True)
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def cho_factor(a):
    a = check_symmetric(a)
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None


def cho_solve(factor, b):
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive-definite `a`."""
    return cho_solve(cho_factor(a), np.asarray(b, dtype=np.float64))


def push_through(psi, lam):
    """Evaluate both sides of the push-through identity.

    ``lhs = psiᵀ (psi psiᵀ + lam I_n)⁻¹`` and
    ``rhs = (psiᵀ psi + lam I_T)⁻¹ psiᵀ`` for ``psi`` of shape (n, T).
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    psi = np.asarray(psi, dtype=np.float64)
    n, T = psi.shape
    # lhs: solve from the right, (psi psiᵀ + lam I) is symmetric
    lhs = solve_spd(psi @ psi.T + lam * np.eye(n), psi).T
    rhs = solve_spd(psi.T @ psi + lam * np.eye(T), psi.T)
    return lhs, rhs


def sym_sqrt(a, inverse=False):
    """Symmetric square root (or inverse root) of an SPD matrix."""
    a = check_symmetric(a, rtol=1e-8)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() <= 0:
        raise NotPositiveDefiniteError("matrix is not positive definite")
    p = -0.5 if inverse else 0.5
    return (v * w**p) @ v.T
