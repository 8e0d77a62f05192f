"""Independent reference computations used by the tests.

Everything here is deliberately naive (loops, textbook algorithms,
explicit Kronecker systems) so it shares no code path with the package.
"""

import numpy as np


def jacobi_eigenvalues(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigenvalue iteration for a symmetric matrix."""
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < tol * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t**2 + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def mode_product_loops(t, m, mode):
    d = list(t.shape)
    d[mode] = m.shape[0]
    out = np.zeros(d)
    for i in range(d[0]):
        for j in range(d[1]):
            for k in range(d[2]):
                idx = [i, j, k]
                acc = 0.0
                for s in range(t.shape[mode]):
                    src = list(idx)
                    src[mode] = s
                    acc += m[idx[mode], s] * t[tuple(src)]
                out[i, j, k] = acc
    return out


def silu_scalar(z):
    return z / (1.0 + np.exp(-z))


def expert_key_loops(gate, up, x, act=silu_scalar):
    d_hidden, d_model = gate.shape
    out = np.zeros(d_hidden)
    for h in range(d_hidden):
        a = sum(gate[h, i] * x[i] for i in range(d_model))
        b = sum(up[h, i] * x[i] for i in range(d_model))
        out[h] = act(a) * b
    return out


def kronecker_global_solve(psis, residuals, lam, d_model):
    """Literal ``(Σ ψψᵀ ⊗ I + λI)⁻¹ Σ (ψ ⊗ I) r`` with column-major vec.

    Returns the stacked update ``[Δ_1 ⋯ Δ_E]`` of shape (d_model, n).
    """
    n = psis.shape[0]
    eye = np.eye(d_model)
    A = lam * np.eye(n * d_model)
    b = np.zeros(n * d_model)
    for psi, r in zip(psis.T, residuals.T):
        A += np.kron(np.outer(psi, psi), eye)
        b += np.kron(psi[:, None], eye) @ r
    theta = np.linalg.solve(A, b)
    return theta.reshape(n, d_model).T


def ridge_lstsq(X, Y, lam):
    """argmin_B ‖Y − X Bᵀ‖² + λ‖B‖² via an augmented least-squares problem."""
    n = X.shape[1]
    Xa = np.vstack([X, np.sqrt(lam) * np.eye(n)])
    Ya = np.vstack([Y, np.zeros((n, Y.shape[1]))])
    return np.linalg.lstsq(Xa, Ya, rcond=None)[0].T


def moe_objective_direct(facts, down, delta, lam, P=None):
    """Memorisation + ridge, one fact and one expert at a time."""
    E = down.shape[0]
    total = 0.0
    for f in facts:
        out = np.zeros(down.shape[1])
        for j in range(E):
            g = f.gating.weights[j]
            if g == 0:
                continue
            k = f.keys[j]
            kp = k if P is None else P[j] @ k
            out += g * (down[j] @ k + delta[j] @ kp)
        total += np.sum((out - f.target_v) ** 2)
    return total + lam * np.sum(delta**2)
