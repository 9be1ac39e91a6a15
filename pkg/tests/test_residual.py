import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from bayesms.coeff import uniform_field
from bayesms.fem import (ParabolicCG, ParabolicMixed, WaveIPDG, assemble_cg, assemble_rt0,
                         fine_solve_wave)
from bayesms.gmsfem import BasisConfig, build_catalog
from bayesms.mesh import build_hierarchy
from bayesms.residual import (ResidualVector, TestSpace, region_norms, residual_mixed,
                              residual_parabolic_cg, residual_step, residual_wave)
from bayesms.sampler import IntervalProblem, ReducedOperators

from conftest import random_field


def identity_space(n, regions=None):
    region = np.zeros(n, int) if regions is None else np.asarray(regions)
    return TestSpace(sp.identity(n, format="csc"), region, int(region.max()) + 1)


def test_cg_exact_solution_has_zero_residual(h8):
    f = random_field(h8, 0)
    M, A = assemble_cg(h8, f)
    dt = 0.01
    rng = np.random.default_rng(0)
    u_prev = rng.standard_normal(M.shape[0])
    u_true = np.linalg.solve((M + dt * A).toarray(), M @ u_prev + dt * (M @ np.ones(M.shape[0])))
    u_fix = rng.standard_normal(M.shape[0])
    r = residual_parabolic_cg(u_true - u_fix, u_fix, u_prev, 1.0, dt, identity_space(M.shape[0]),
                              M, A)
    assert np.abs(r.values).max() <= 1e-10


def test_cg_galerkin_orthogonality(h12, channel12):
    form = ParabolicCG(h12, channel12, 0.01)
    cat = build_catalog(form, 0.0, BasisConfig(2, 0, 2))
    P = cat.fixed.toarray()
    M, A = form.mass, form.stiffness(0.0)
    dt = form.dt
    u_prev = np.zeros(form.ndof)
    G = P.T @ ((M + dt * A) @ P)
    u_fix = P @ np.linalg.solve(G, P.T @ (M @ np.ones(form.ndof)) * dt)
    ts = TestSpace(cat.fixed, np.zeros(P.shape[1], int), 1)
    r = residual_parabolic_cg(np.zeros(form.ndof), u_fix, u_prev, 1.0, dt, ts, M, A)
    assert np.abs(r.values).max() <= 1e-10 * np.abs(M @ np.ones(form.ndof)).sum()


def test_cg_dense_oracle():
    h = build_hierarchy(4, 4, 2, 2)
    f = random_field(h, 1)
    M, A = assemble_cg(h, f)
    Md, Ad = M.toarray(), A.toarray()
    rng = np.random.default_rng(2)
    n = Md.shape[0]
    V = rng.standard_normal((n, 3))
    up, uf, uo, fv = (rng.standard_normal(n) for _ in range(4))
    dt = 0.05
    expect = [fv @ Md @ v - ((up + uf - uo) / dt) @ Md @ v - (up + uf) @ Ad @ v for v in V.T]
    ts = TestSpace(sp.csc_matrix(V), np.array([0, 0, 1]), 2)
    r = residual_parabolic_cg(up, uf, uo, fv, dt, ts, M, A)
    np.testing.assert_allclose(r.values, expect, rtol=1e-12)


def test_cg_errors(h8):
    M, A = assemble_cg(h8, uniform_field(h8))
    n = M.shape[0]
    ts = identity_space(n)
    with pytest.raises(ValueError):
        residual_parabolic_cg(np.zeros(n + 1), np.zeros(n), np.zeros(n), 0.0, 0.1, ts, M, A)
    with pytest.raises(ValueError):
        residual_parabolic_cg(np.zeros(n), np.zeros(n), np.zeros(n), 0.0, 0.0, ts, M, A)


def test_mixed_fine_solution_zero(h8):
    form = ParabolicMixed(h8, random_field(h8, 2), 0.01)
    (x,) = form.fine_march([np.zeros(form.ndof)], 0.0, 1)
    Mv, B = form.blocks(0.01)
    v = form.velocity(x)
    ts = identity_space(form.n_vel)
    r = residual_mixed(v - 0.5 * v, 0.5 * v, form.pressure(x), ts, Mv, B)
    assert np.abs(r.values).max() <= 1e-10 * np.abs(form.pressure(x)).max()
    r0 = residual_mixed(np.zeros(form.n_vel), np.zeros(form.n_vel), np.zeros(form.n_pres),
                        ts, Mv, B)
    assert np.all(r0.values == 0)


def test_mixed_single_cell_by_hand():
    Mv, B = assemble_rt0(np.full((1, 1), 2.0), 1.0, 1.0)   # kappa = 2
    v = np.array([1.0, 2.0, -1.0, 3.0])                     # bottom, top, left, right
    p = np.array([0.5])
    r = residual_mixed(v, np.zeros(4), p, identity_space(4), Mv, B)
    k = 0.5
    expect = [k * (1 / 3 + 2 / 6) + 0.5, k * (1 / 6 + 2 / 3) - 0.5,
              k * (-1 / 3 + 3 / 6) + 0.5, k * (-1 / 6 + 3 / 3) - 0.5]
    np.testing.assert_allclose(r.values, expect, rtol=1e-14)


def test_wave_fine_update_zero(h8):
    form = WaveIPDG(h8, uniform_field(h8, 1e-3), 0.01)
    A = form.stiffness(0.0)
    u0 = np.random.default_rng(3).standard_normal(form.ndof)
    s = fine_solve_wave(A, form.mass, u0, u0, 0.0, 0.01, 2)
    r = residual_wave(s[3].values, s[2].values, s[1].values, 0.0, 0.01,
                      identity_space(form.ndof), form.mass, A)
    scale = np.abs(form.mass @ u0).max() / 0.01 ** 2
    assert np.abs(r.values).max() <= 1e-10 * scale


def test_wave_difference_identity():
    n = 5
    rng = np.random.default_rng(4)
    um, uc = rng.standard_normal(n), rng.standard_normal(n)
    M = sp.identity(n, format="csr")
    r = residual_wave(2 * uc - um, uc, um, 0.0, 0.1, identity_space(n), M,
                      sp.csr_matrix((n, n)))
    assert np.abs(r.values).max() < 1e-12


def test_wave_dense_oracle():
    rng = np.random.default_rng(5)
    n = 6
    Md = np.diag(rng.uniform(1, 2, n))
    Ad = rng.standard_normal((n, n))
    Ad = Ad @ Ad.T
    V = rng.standard_normal((n, 2))
    un, uc, up, fv = (rng.standard_normal(n) for _ in range(4))
    dt = 0.2
    expect = [((un - 2 * uc + up) / dt ** 2) @ Md @ v + uc @ Ad @ v - fv @ Md @ v for v in V.T]
    r = residual_wave(un, uc, up, fv, dt, TestSpace(sp.csc_matrix(V), np.array([0, 1]), 2),
                      sp.csr_matrix(Md), sp.csr_matrix(Ad))
    np.testing.assert_allclose(r.values, expect, rtol=1e-12)


def test_residual_step_matches_direct(h8):
    form = ParabolicCG(h8, random_field(h8, 6), 0.02)
    rng = np.random.default_rng(6)
    x_old, x_new = rng.standard_normal(form.ndof), rng.standard_normal(form.ndof)
    ts = identity_space(form.ndof)
    a = residual_step(form, x_new, [x_old], 0.02, ts)
    b = residual_parabolic_cg(x_new, np.zeros(form.ndof), x_old, 1.0, 0.02, ts,
                              form.mass, form.stiffness(0.02))
    # the step operator is the backward Euler system divided by dt
    np.testing.assert_allclose(a.values * form.dt, b.values * form.dt, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-10, atol=1e-10)


def test_region_norm_examples():
    r = ResidualVector(np.zeros(4), np.array([0, 0, 1, 1]), 2)
    n = region_norms(r)
    assert n.global_norm == 0 and np.all(n.local == 0)
    r = ResidualVector(np.array([3.0, 4.0, 0.0, 0.0]), np.array([0, 0, 1, 1]), 2)
    n = region_norms(r)
    np.testing.assert_allclose(n.local, [5.0, 0.0])
    assert n.global_norm == pytest.approx(5.0)


def test_region_norm_sup_variant():
    cols = sp.csc_matrix(np.diag([1.0, 2.0, 1.0]))
    ts = TestSpace(cols, np.array([0, 0, 1]), 2)
    r = ResidualVector(np.array([1.0, 4.0, -3.0]), ts.region, 2)
    n = region_norms(r, ts, sp.identity(3))
    np.testing.assert_allclose(n.sup, [2.0, 3.0])


def test_residual_vector_length_check():
    with pytest.raises(ValueError):
        ResidualVector(np.zeros(3), np.zeros(2, int), 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.integers(1, 5), st.data())
def test_region_norms_partition(vals, n_regions, data):
    region = np.array(data.draw(st.lists(st.integers(0, n_regions - 1),
                                         min_size=len(vals), max_size=len(vals))))
    n = region_norms(ResidualVector(np.array(vals), region, n_regions))
    assert np.sum(n.local ** 2) == pytest.approx(n.global_norm ** 2, rel=1e-12, abs=1e-12)
    assert n.global_norm == pytest.approx(np.linalg.norm(vals), rel=1e-12, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_affine(seed):
    h = build_hierarchy(4, 4, 2, 2)
    M, A = assemble_cg(h, random_field(h, seed))
    n = M.shape[0]
    rng = np.random.default_rng(seed)
    ts = identity_space(n)
    u, up, d = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    dt = 0.1
    r1 = residual_parabolic_cg(u + d, np.zeros(n), up, 1.0, dt, ts, M, A).values
    r0 = residual_parabolic_cg(u, np.zeros(n), up, 1.0, dt, ts, M, A).values
    lin = -(M / dt + A) @ d
    assert np.abs(r1 - r0 - lin).max() <= 1e-12 * max(1.0, np.abs(lin).max())


@pytest.mark.parametrize("kind", ["cg", "mixed", "ipdg"])
def test_projection_consistency(kind, h12, channel12):
    """All candidates active: the reduced solution is the snapshot-space Galerkin solution."""
    if kind == "cg":
        form = ParabolicCG(h12, channel12, 0.01)
    elif kind == "mixed":
        form = ParabolicMixed(h12, channel12, 0.01, source=np.linspace(-1, 1, h12.n_cells))
    else:
        form = WaveIPDG(h12, channel12.scaled(1e-3), 0.005)
    cat = build_catalog(form, 0.0, BasisConfig(1, 3, 2, seed=1))
    hist = [np.zeros(form.ndof)] * form.n_history
    if kind == "ipdg":
        hist = [np.random.default_rng(0).standard_normal(form.ndof)] * 2
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 1), hist)
    ev = prob.evaluate(np.arange(cat.n_fixed + cat.n_candidates))
    Phi = cat.trial().toarray()
    op = form.operator(form.dt)
    beta = np.linalg.solve(Phi.T @ op.lhs @ Phi, Phi.T @ op.rhs(hist))
    x = Phi @ beta
    np.testing.assert_allclose(prob.fine_state(ev), x, atol=1e-8 * np.abs(x).max())


@pytest.mark.parametrize("kind", ["cg", "mixed", "ipdg"])
def test_full_span_residual_vanishes(kind, h12, channel12):
    """Without buffer snapshots every candidate on makes trial and test spans equal."""
    if kind == "cg":
        form = ParabolicCG(h12, channel12, 0.01)
    elif kind == "mixed":
        form = ParabolicMixed(h12, channel12, 0.01, source=np.linspace(-1, 1, h12.n_cells))
    else:
        form = WaveIPDG(h12, channel12.scaled(1e-3), 0.005)
    n_total = 4   # snapshots per region (fine edges per coarse edge for mixed)
    cat = build_catalog(form, 0.0, BasisConfig(1, n_total - 1, 0, seed=1))
    hist = [np.random.default_rng(0).standard_normal(form.ndof)] * form.n_history
    if kind == "mixed":
        hist = [np.zeros(form.ndof)]
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 1), hist)
    fixed = prob.evaluate(prob.red.fixed_index)
    full = prob.evaluate(np.arange(cat.n_fixed + cat.n_candidates))
    assert np.sqrt(full.r2) <= 1e-8 * np.sqrt(fixed.r2)
