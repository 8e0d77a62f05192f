import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mote import editors, moe, tucker
from mote.editors import NullSpaceProjectorSet
from oracles import kronecker_global_solve, moe_objective_direct, ridge_lstsq


def fact(keys, weights, d_model):
    keys = np.asarray(keys, float)
    w = np.asarray(weights, float)
    sel = tuple(int(j) for j in np.flatnonzero(w))
    return moe.Fact(np.zeros(d_model), np.zeros(d_model), moe.GatingResult(sel, w), keys)


def instance(seed, E=4, K=2, d_model=12, d_hidden=8, T=5, lam=0.5):
    layer = moe.random_layer(E, K, d_model, d_hidden, seed=seed)
    return layer, moe.synthesize_batch(layer, T, seed=seed + 1, lam=lam)


def random_projectors(rng, E, d_hidden, keep):
    P = []
    for _ in range(E):
        q = np.linalg.qr(rng.standard_normal((d_hidden, keep)))[0]
        P.append(q @ q.T)
    return NullSpaceProjectorSet(np.stack(P), 0.02, 0)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# -- projectors ---------------------------------------------------------------

def test_projectors_empty_set_is_identity():
    proj = editors.build_projectors(moe.PreservationSet.empty(3, 5))
    assert np.array_equal(proj.P, np.broadcast_to(np.eye(5), (3, 5, 5)))


def test_projectors_full_span_is_zero():
    pres = moe.PreservationSet([np.eye(4) * 3.0])
    np.testing.assert_allclose(editors.build_projectors(pres).P[0], 0, atol=1e-14)


def test_projectors_two_dim_subspace(rng):
    basis = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    k0 = basis @ rng.standard_normal((2, 20))
    P = editors.build_projectors(moe.PreservationSet([k0]), 0.02).P[0]
    np.testing.assert_allclose(P @ k0, 0, atol=1e-8)
    comp = np.eye(4) - basis @ basis.T
    np.testing.assert_allclose(P, comp, atol=1e-10)


def test_projectors_threshold_validation():
    with pytest.raises(ValueError):
        editors.build_projectors(moe.PreservationSet.empty(1, 2), 1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 40))
def test_projectors_idempotent_symmetric(seed, rank, M):
    rng = np.random.default_rng(seed)
    k0 = rng.standard_normal((6, rank)) @ rng.standard_normal((rank, M))
    P = editors.build_projectors(moe.PreservationSet([k0]), 0.02, 6).P[0]
    assert np.linalg.norm(P @ P - P) <= 1e-8
    assert np.linalg.norm(P - P.T) <= 1e-12
    ev = np.linalg.eigvalsh(P)
    assert np.all(np.minimum(np.abs(ev), np.abs(ev - 1)) < 1e-8)


# -- dense baseline -------------------------------------------------------------

def test_dense_memit_nothing_to_edit(rng):
    W, K1 = rng.standard_normal((6, 4)), rng.standard_normal((4, 3))
    delta = editors.solve_dense_memit(W, K1, W @ K1, rng.standard_normal((4, 10)), 0.1)
    np.testing.assert_allclose(delta, 0, atol=1e-14)


def test_dense_memit_rank_one_limit(rng):
    W, v = rng.standard_normal((6, 4)), rng.standard_normal(6)
    e1 = np.eye(4)[:, :1]
    delta = editors.solve_dense_memit(W, e1, v[:, None], None, 1e-8)
    np.testing.assert_allclose(delta, np.outer(v - W[:, 0], e1[:, 0]), atol=1e-7)


def test_dense_memit_local_optimality(rng):
    W, K1, V1, K0 = (rng.standard_normal(s) for s in [(6, 4), (4, 3), (6, 3), (4, 8)])
    lam = 0.3

    def f(D):
        return (np.sum(((W + D) @ K1 - V1) ** 2) + np.sum((D @ K0) ** 2) + lam * np.sum(D**2))

    D = editors.solve_dense_memit(W, K1, V1, K0, lam)
    base = f(D)
    for _ in range(100):
        assert f(D + 1e-3 * rng.standard_normal(D.shape)) > base


# -- global oracle / woodbury ------------------------------------------------------

def test_oracle_zero_residual():
    layer, batch = instance(0)
    d = editors.solve_global_oracle(batch, layer, residuals=np.zeros((12, 5)))
    assert np.all(d.delta == 0)


def test_oracle_single_unit_key():
    E, d_model, d_hidden = 3, 5, 4
    layer = moe.random_layer(E, 1, d_model, d_hidden, seed=0)
    keys = np.zeros((E, d_hidden))
    keys[1, 2] = 1.0
    batch = moe.EditBatch([fact(keys, [0, 1, 0], d_model)], lam=1.0)
    r = np.arange(1.0, d_model + 1)
    for solve in (editors.solve_global_oracle, editors.solve_woodbury):
        d = solve(batch, layer, residuals=r[:, None]).delta
        np.testing.assert_allclose(d[1], np.outer(r / 2, keys[1]), atol=1e-14)
        assert np.all(d[0] == 0) and np.all(d[2] == 0)


def test_oracle_matches_kronecker_system():
    layer, batch = instance(3, E=3, d_model=4, d_hidden=3, T=4, lam=0.7)
    R = batch.residuals(layer)
    psi = editors.design_matrix(batch)
    ref = kronecker_global_solve(psi, R, 0.7, 4)
    d = editors.solve_global_oracle(batch, layer)
    np.testing.assert_allclose(editors.tensor_to_stacked(d.delta), ref, atol=1e-12)


def test_oracle_minimises_objective(rng):
    layer, batch = instance(4, E=4, d_hidden=8, T=5)
    d = editors.solve_global_oracle(batch, layer)
    base = editors.objective_value(batch, layer, d.delta)
    for _ in range(100):
        assert editors.objective_value(batch, layer, d.delta + 1e-3 * rng.standard_normal(d.delta.shape)) > base


def test_oracle_size_guard():
    layer, batch = instance(0, E=4, d_hidden=130)
    with pytest.raises(ValueError):
        editors.solve_global_oracle(batch, layer)


def test_objective_agrees_with_direct_loop(rng):
    layer, batch = instance(8)
    proj = random_projectors(rng, 4, 8, 5)
    delta = rng.standard_normal((4, 12, 8))
    direct = moe_objective_direct(batch.facts, layer.down(), delta, 0.5, proj.P)
    assert abs(editors.objective_value(batch, layer, delta, proj) - direct) < 1e-9 * direct


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 24), st.integers(1, 40),
       st.sampled_from([1e-3, 0.1, 1.0, 10.0]), st.booleans())
def test_woodbury_equals_oracle(seed, E, d_hidden, T, lam, project):
    rng = np.random.default_rng(seed)
    layer, batch = instance(seed, E=E, K=min(2, E), d_model=10, d_hidden=d_hidden, T=T, lam=lam)
    proj = random_projectors(rng, E, d_hidden, max(1, d_hidden // 2)) if project else None
    a = editors.solve_woodbury(batch, layer, proj).delta
    b = editors.solve_global_oracle(batch, layer, proj).delta
    assert rel(a, b) < 1e-9


def test_woodbury_zero_residual():
    layer, batch = instance(1)
    assert np.all(editors.solve_woodbury(batch, layer, residuals=np.zeros((12, 5))).delta == 0)


def test_woodbury_duplicate_fact():
    layer, batch = instance(2, T=1)
    dup = moe.EditBatch(batch.facts * 2, batch.lam)
    r = batch.residuals(layer)
    d_dup = editors.solve_woodbury(dup, layer, residuals=np.hstack([r, r])).delta
    assert np.all(np.isfinite(d_dup))
    # two copies of (ψ, r): Δ = 2 r ψᵀ / (2‖ψ‖² + λ)
    psi = editors.design_matrix(batch)[:, 0]
    expected = 2 * np.outer(r[:, 0], psi) / (2 * psi @ psi + batch.lam)
    np.testing.assert_allclose(editors.tensor_to_stacked(d_dup), expected, atol=1e-13)
    np.testing.assert_allclose(d_dup, editors.solve_global_oracle(dup, layer, residuals=np.hstack([r, r])).delta,
                               atol=1e-12)


def test_woodbury_report_phases():
    layer, batch = instance(5)
    rep = editors.solve_woodbury(batch, layer).report
    assert set(rep.timings_ns) == {"kernel", "factor", "assembly"}
    assert all(v > 0 for v in rep.timings_ns.values())
    rec = rep.record()
    assert rec["solver"] == "woodbury" and rec["lambda"] == 0.5 and rec["T"] == 5
    assert rec["objective_after"] < rec["objective_before"]


def test_woodbury_local_optimality_projected(rng):
    layer, batch = instance(6)
    proj = random_projectors(rng, 4, 8, 4)
    d = editors.solve_woodbury(batch, layer, proj).delta
    base = editors.objective_value(batch, layer, d, proj)
    for _ in range(100):
        assert editors.objective_value(batch, layer, d + 1e-3 * rng.standard_normal(d.shape), proj) >= base


def test_objective_trivial_values():
    layer, batch = instance(7)
    zero = np.zeros((4, 12, 8))
    R = batch.residuals(layer)
    assert abs(editors.objective_value(batch, layer, zero) - np.sum(R**2)) < 1e-12
    exact = moe.synthesize_batch(layer, 3, seed=0, residual_scale=0.0)
    pres = moe.PreservationSet.from_inputs(layer, np.ones((2, 12)))
    assert editors.objective_value(exact, layer, zero, preservation=pres) < 1e-24


@pytest.mark.parametrize("solver", ["oracle", "woodbury", "bcd", "tucker"])
def test_linearity_in_residuals(solver, rng):
    layer, batch = instance(9)
    R = batch.residuals(layer)
    proj = random_projectors(rng, 4, 8, 5)
    f = tucker.hosvd(layer.down(), (2, 6, 4))
    run = {
        "oracle": lambda r: editors.solve_global_oracle(batch, layer, proj, residuals=r),
        "woodbury": lambda r: editors.solve_woodbury(batch, layer, proj, residuals=r),
        "bcd": lambda r: editors.solve_bcd(batch, layer, proj, residuals=r),
        "tucker": lambda r: editors.solve_tucker(batch, layer, f, proj, residuals=r),
    }[solver]
    a, b = run(R).delta, run(-2.5 * R).delta
    np.testing.assert_allclose(b, -2.5 * a, rtol=1e-12, atol=1e-14)
    assert np.array_equal(run(R).delta, a)  # deterministic


def test_null_space_guarantee(rng):
    layer, batch = instance(10, d_hidden=8, T=6)
    pres_keys = []
    for _ in range(4):
        basis = np.linalg.qr(rng.standard_normal((8, 3)))[0]
        pres_keys.append(basis @ rng.standard_normal((3, 30)))
    proj = editors.build_projectors(moe.PreservationSet(pres_keys))
    f = tucker.hosvd(layer.down(), (4, 12, 8))
    for d in (editors.solve_woodbury(batch, layer, proj).delta,
              editors.solve_tucker(batch, layer, f, proj).delta):
        for j, k0 in enumerate(pres_keys):
            drift = np.linalg.norm(d[j] @ k0, axis=0) / np.linalg.norm(k0, axis=0)
            assert drift.max() <= 1e-8 * np.linalg.norm(d[j])


# -- BCD ---------------------------------------------------------------------------

def test_bcd_single_expert_one_iteration():
    layer, batch = instance(11, E=1, K=1)
    a = editors.solve_bcd(batch, layer, iterations=1).delta
    np.testing.assert_allclose(a, editors.solve_woodbury(batch, layer).delta, rtol=1e-10, atol=1e-13)


def test_bcd_disjoint_routing_one_sweep():
    layer, batch = instance(12, E=4, K=1, T=12)
    a = editors.solve_bcd(batch, layer, iterations=1).delta
    b = editors.solve_global_oracle(batch, layer).delta
    assert rel(a, b) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_bcd_trace_monotone(seed):
    layer, batch = instance(seed, E=5, K=3, T=8)
    trace = []
    d = editors.solve_bcd(batch, layer, iterations=4, trace=trace)
    assert len(trace) == 1 + 4 * 5
    assert all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))
    opt = editors.solve_woodbury(batch, layer).report.objective_after
    assert d.report.objective_after >= opt * (1 - 1e-12)
    assert abs(trace[-1] - d.report.objective_after) <= 1e-10 * trace[-1]


def test_bcd_rejects_zero_iterations():
    layer, batch = instance(0)
    with pytest.raises(ValueError):
        editors.solve_bcd(batch, layer, iterations=0)


# -- Tucker core ---------------------------------------------------------------------

def test_compress_identity_factors(small_layer, small_batch):
    E, d_model, d_hidden = 4, 16, 8
    f = tucker.TuckerFactors(np.eye(E), np.eye(d_model), np.eye(d_hidden))
    comp = editors.compress_batch(small_batch, small_layer, f)
    wk = editors.weighted_keys(small_batch)
    np.testing.assert_allclose(comp.Phi, wk.reshape(len(wk), -1), atol=1e-15)
    np.testing.assert_allclose(comp.Rtilde, small_batch.residuals(small_layer).T, atol=1e-15)


def test_compress_orthogonal_residual_is_killed(small_layer, small_batch, rng):
    f = tucker.hosvd(small_layer.down(), (2, 5, 4))
    r = rng.standard_normal(16)
    r -= f.U_out @ (f.U_out.T @ r)
    R = np.tile(r[:, None], (1, 5))
    comp = editors.compress_batch(small_batch, small_layer, f, residuals=R)
    np.testing.assert_allclose(comp.Rtilde, 0, atol=1e-13)


def test_compress_matches_double_loop(small_layer, small_batch, rng):
    f = tucker.hosvd(small_layer.down(), (3, 5, 4))
    proj = random_projectors(rng, 4, 8, 6)
    comp = editors.compress_batch(small_batch, small_layer, f, proj)
    for t, ft in enumerate(small_batch.facts):
        for a in range(3):
            phi = sum(ft.gating.weights[j] * f.U_e[j, a] * (f.U_in.T @ proj.P[j] @ ft.keys[j]) for j in range(4))
            np.testing.assert_allclose(comp.Phi[t, a * 4:(a + 1) * 4], phi, atol=1e-12)


def test_compress_dims_mismatch(small_layer, small_batch):
    f = tucker.hosvd(np.ones((3, 16, 8)), (1, 1, 1))
    with pytest.raises(ValueError):
        editors.compress_batch(small_batch, small_layer, f)


def test_core_zero_residuals(rng):
    comp = editors.CompressedBatch(rng.standard_normal((4, 6)), np.zeros((4, 3)), 2, 3)
    assert np.all(editors.solve_tucker_core(comp, 0.1).flat == 0)


def test_core_single_fact(rng):
    phi, rt = rng.standard_normal(6), rng.standard_normal(3)
    comp = editors.CompressedBatch(phi[None], rt[None], 2, 3)
    for side in ("kernel", "primal", "auto"):
        flat = editors.solve_tucker_core(comp, 0.4, side).flat
        np.testing.assert_allclose(flat, np.outer(rt, phi) / (phi @ phi + 0.4), atol=1e-14)


def test_core_sides_agree_and_match_ridge(rng):
    comp = editors.CompressedBatch(rng.standard_normal((6, 12)), rng.standard_normal((6, 5)), 3, 4)
    a = editors.solve_tucker_core(comp, 0.2, "kernel").flat
    b = editors.solve_tucker_core(comp, 0.2, "primal").flat
    assert np.linalg.norm(a - b) < 1e-10 * np.linalg.norm(a)
    np.testing.assert_allclose(a, ridge_lstsq(comp.Phi, comp.Rtilde, 0.2), atol=1e-10)


def test_core_side_validation(rng):
    comp = editors.CompressedBatch(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), 1, 2)
    with pytest.raises(ValueError):
        editors.solve_tucker_core(comp, 0.1, "left")
    with pytest.raises(ValueError):
        editors.solve_tucker_core(comp, 0.0)


def test_reconstruct_zero_core(small_layer):
    f = tucker.hosvd(small_layer.down(), (2, 3, 3))
    assert np.all(editors.reconstruct_delta(tucker.CoreTensor(np.zeros((2, 3, 3))), f) == 0)


def test_reconstruct_shared_direction(rng):
    E = 4
    f = tucker.TuckerFactors(np.ones((E, 1)) / np.sqrt(E), np.linalg.qr(rng.standard_normal((6, 2)))[0],
                             np.linalg.qr(rng.standard_normal((5, 3)))[0])
    g = rng.standard_normal((1, 2, 3))
    d = editors.reconstruct_delta(tucker.CoreTensor(g), f)
    base = f.U_out @ g[0] @ f.U_in.T
    for j in range(E):
        np.testing.assert_allclose(d[j], base / np.sqrt(E), atol=1e-14)


def test_reconstruct_matches_loop(small_layer, rng):
    f = tucker.hosvd(small_layer.down(), (3, 5, 4))
    proj = random_projectors(rng, 4, 8, 5)
    g = rng.standard_normal((3, 5, 4))
    d = editors.reconstruct_delta(tucker.CoreTensor(g), f, proj)
    for j in range(4):
        ref = f.U_out @ sum(f.U_e[j, a] * g[a] for a in range(3)) @ f.U_in.T @ proj.P[j]
        np.testing.assert_allclose(d[j], ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 30), st.sampled_from([1e-3, 0.1, 1.0, 10.0]))
def test_full_rank_tucker_equals_woodbury(seed, E, T, lam):
    layer, batch = instance(seed, E=E, K=min(2, E), d_model=8, d_hidden=6, T=T, lam=lam)
    f = tucker.hosvd(layer.down(), (E, 8, 6))
    ident = NullSpaceProjectorSet.identity(E, 6)
    a = editors.solve_tucker(batch, layer, f, ident).delta
    b = editors.solve_woodbury(batch, layer, ident).delta
    assert rel(a, b) < 1e-8


def test_tucker_report_and_core(small_layer, small_batch):
    f = tucker.hosvd(small_layer.down(), (2, 4, 4))
    d = editors.solve_tucker(small_batch, small_layer, f)
    assert d.core.g.shape == (2, 4, 4)
    assert d.report.ranks == (2, 4, 4)
    assert set(d.report.timings_ns) == {"compress", "solve", "assembly"}
    np.testing.assert_allclose(d.delta, editors.reconstruct_delta(d.core, f), atol=1e-14)
