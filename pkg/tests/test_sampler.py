import numpy as np
import pytest
import scipy.sparse as sp

import bayesms.sampler as sampler
from bayesms.bayes import PosteriorSpec, PriorModel
from bayesms.fem import ParabolicCG, WaveIPDG
from bayesms.gmsfem import BasisConfig, build_catalog, full_space_catalog
from bayesms.mesh import build_hierarchy
from bayesms.sampler import (BasisSelection, IntervalProblem, ReducedOperators, SampleChain,
                             SampleRecord, SamplerConfig, chain_statistics, gibbs_sample,
                             sequential_sample, solve_beta)

from conftest import exact_sweep_kernel, random_field, toy_gibbs_problem


@pytest.fixture
def cg_setup(h12, channel12):
    form = ParabolicCG(h12, channel12, 0.01)
    cat = build_catalog(form, 0.0, BasisConfig(1, 3, 2, seed=4))
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 1), [np.zeros(form.ndof)])
    return form, cat, prob


def flat_prior(cat, region_p, cand_p):
    return PriorModel(np.full(cat.n_regions, float(region_p)),
                      tuple(np.full(cat.region_candidates(r).size, float(cand_p))
                            for r in range(cat.n_regions)), 1.0, 1.0)


def test_full_space_reproduces_fine_step(h8):
    form = ParabolicCG(h8, random_field(h8, 0), 0.01)
    cat = full_space_catalog(form)
    x0 = np.random.default_rng(0).standard_normal(form.ndof)
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 3), [x0])
    ev = solve_beta(prob, prob.red.fixed_index)
    ref = form.fine_march([x0], 0.0, 3)
    for s in range(3):
        x = prob.fine_state(ev, s)
        assert np.linalg.norm(x - ref[s]) <= 1e-10 * np.linalg.norm(ref[s])


def test_permanent_only_is_dense_galerkin(cg_setup):
    form, cat, prob = cg_setup
    ev = solve_beta(prob, prob.red.fixed_index)
    P = cat.fixed.toarray()
    op = form.operator(0.01)
    beta = np.linalg.solve(P.T @ op.lhs @ P, P.T @ op.rhs([np.zeros(form.ndof)]))
    np.testing.assert_allclose(ev.betas[-1], beta, rtol=1e-10)


def test_one_region_candidates_dense_oracle():
    h = build_hierarchy(4, 4, 2, 2)
    form = ParabolicCG(h, random_field(h, 2), 0.02)
    cat = build_catalog(form, 0.0, BasisConfig(1, 2, 1, seed=0))
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 1), [np.zeros(form.ndof)])
    cands = cat.region_candidates(4)
    active = np.concatenate([np.arange(cat.n_fixed), cat.n_fixed + cands])
    ev = solve_beta(prob, active)
    Phi = cat.trial().toarray()[:, active]
    op = form.operator(0.02)
    beta, *_ = np.linalg.lstsq(Phi.T @ op.lhs @ Phi, Phi.T @ op.rhs([np.zeros(form.ndof)]),
                               rcond=None)
    np.testing.assert_allclose(prob.fine_state(ev), Phi @ beta, rtol=1e-9, atol=1e-12)
    with pytest.raises(ValueError):
        solve_beta(prob, [])


def test_multi_step_wave_reduction(h8):
    form = WaveIPDG(h8, random_field(h8, 3, 1e-3, 1.0), 0.005)
    cat = full_space_catalog(form)
    u0 = np.random.default_rng(1).standard_normal(form.ndof)
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 4), [u0, u0])
    ev = prob.evaluate(prob.red.fixed_index)
    ref = form.fine_march([u0, u0], 0.0, 4)
    np.testing.assert_allclose(prob.fine_state(ev), ref[-1], rtol=1e-9,
                               atol=1e-10 * np.abs(ref[-1]).max())
    hist = prob.fine_history(ev)
    np.testing.assert_allclose(hist[1], ref[-2], atol=1e-10 * np.abs(ref[-2]).max())


def test_sequential_degenerate_priors(cg_setup):
    form, cat, prob = cg_setup
    fixed = solve_beta(prob, prob.red.fixed_index)
    chain = sequential_sample(prob, flat_prior(cat, 0.0, 0.0), cat.cand_region,
                              SamplerConfig(n_samples=5), seed=1)
    for rec in chain.records:
        assert rec.selection.n_candidates == 0
        np.testing.assert_array_equal(rec.state, prob.fine_state(fixed))
    chain = sequential_sample(prob, flat_prior(cat, 1.0, 1.0), cat.cand_region,
                              SamplerConfig(n_samples=4), seed=1)
    counts = chain.counts()
    assert np.all(counts == counts[0]) and counts[0] > 0
    assert np.all(chain.states() == chain.states()[0])


def test_sampler_determinism(cg_setup):
    form, cat, prob = cg_setup
    prior = flat_prior(cat, 0.5, 0.5)
    post = PosteriorSpec(sigma_L=1e-2)
    a = gibbs_sample(prob, prior, cat.cand_region, post, SamplerConfig(n_sweeps=4), seed=7)
    b = gibbs_sample(prob, prior, cat.cand_region, post, SamplerConfig(n_sweeps=4), seed=7)
    assert np.array_equal(a.states(), b.states())
    assert [r.selection.I.tolist() for r in a.records] == [r.selection.I.tolist() for r in b.records]
    s1 = sequential_sample(prob, prior, cat.cand_region, SamplerConfig(n_samples=3), seed=7)
    s2 = sequential_sample(prob, prior, cat.cand_region, SamplerConfig(n_samples=3), seed=7)
    assert np.array_equal(s1.states(), s2.states())


def test_bordered_tracker_matches_full_solves(cg_setup, monkeypatch):
    form, cat, prob = cg_setup
    prior = flat_prior(cat, 1.0, 0.5)
    post = PosteriorSpec(sigma_L=3e-3)
    cfg = SamplerConfig(n_sweeps=5)
    fast = gibbs_sample(prob, prior, cat.cand_region, post, cfg, seed=3)
    monkeypatch.setattr(sampler, "_tracker", lambda p, b: sampler._FullTracker(p, b))
    slow = gibbs_sample(prob, prior, cat.cand_region, post, cfg, seed=3)
    for a, b in zip(fast.records, slow.records):
        assert np.array_equal(a.selection.I, b.selection.I)
        assert a.residual_norm == pytest.approx(b.residual_norm, rel=1e-9)


def test_gibbs_respects_region_bits(cg_setup):
    form, cat, prob = cg_setup
    J = np.zeros(cat.n_regions, dtype=bool)
    J[[0, 5]] = True
    chain = gibbs_sample(prob, flat_prior(cat, 0.5, 0.9), cat.cand_region,
                         PosteriorSpec(sigma_L=1.0), SamplerConfig(n_sweeps=3), seed=0, J_fixed=J)
    for rec in chain.records:
        assert not rec.selection.I[~J[cat.cand_region]].any()
        assert np.array_equal(rec.selection.J, J)


def test_gibbs_small_sigma_saturates(cg_setup):
    form, cat, prob = cg_setup
    J = np.ones(cat.n_regions, dtype=bool)
    chain = gibbs_sample(prob, flat_prior(cat, 1.0, 0.5), cat.cand_region,
                         PosteriorSpec(sigma_L=1e-9), SamplerConfig(n_sweeps=3), seed=0, J_fixed=J)
    all_on = solve_beta(prob, np.arange(cat.n_fixed + cat.n_candidates))
    assert chain.counts()[-1] >= 0.8 * cat.n_candidates
    assert chain.residual_norms()[-1] <= 1.5 * np.sqrt(all_on.r2)


def test_gibbs_large_sigma_follows_prior():
    prob, prior, cand_region, J, _, scan, bits_of, flip = toy_gibbs_problem()
    post = PosteriorSpec(sigma_L=1e6)
    chain = gibbs_sample(prob, prior, cand_region, post, SamplerConfig(n_sweeps=4000),
                         seed=2, J_fixed=J)
    freq = np.array([r.selection.I[scan] for r in chain.records]).mean(axis=0)
    pens = [prob.penalty(prob.red.fixed_index, prob.red.n_fixed + c) for c in scan]
    for f, c, pen in zip(freq, scan, pens):
        odds = prior.flat_candidate_p()[c] / (1 - prior.flat_candidate_p()[c]) * pen
        assert f == pytest.approx(odds / (1 + odds), abs=0.04)


def test_toy_kernel_stationary_matches_joint():
    prob, prior, cand_region, J, post, scan, bits_of, flip = toy_gibbs_problem()
    P = exact_sweep_kernel(flip)
    w, V = np.linalg.eig(P.T)
    pi = np.real(V[:, np.argmin(np.abs(w - 1))])
    pi /= pi.sum()
    # unnormalized joint: prior odds * Gram determinant ratio * likelihood
    p = prior.flat_candidate_p()
    G = prob.red.gram
    joint = np.zeros(4)
    for s in range(4):
        bits = bits_of(s)
        act = prob.active_from_bits(bits)
        r2 = prob.evaluate(act).r2
        odds = np.prod([p[c] / (1 - p[c]) for c in np.flatnonzero(bits)])
        joint[s] = odds * np.linalg.det(G[np.ix_(act, act)]) * np.exp(-r2 / post.sigma_L ** 2)
    joint /= joint.sum()
    np.testing.assert_allclose(pi, joint, rtol=1e-8)


def test_chain_statistics_examples():
    u = np.array([1.0, -2.0, 3.0])
    sel = BasisSelection(np.ones(1, bool), np.array([True, False]), np.zeros(1), np.arange(1))
    chain = SampleChain("gibbs", 0, 0, [SampleRecord(sel, 1.0, u, []),
                                        SampleRecord(sel, 1.0, -u, [])])
    st = chain_statistics(chain, 2)
    np.testing.assert_allclose(st.mean, 0.0)
    np.testing.assert_allclose(st.std, np.abs(u))
    np.testing.assert_allclose(st.frequencies, [1.0, 0.0])
    const = SampleChain("gibbs", 0, 0, [SampleRecord(sel, 1.0, u, [])] * 3)
    assert np.all(chain_statistics(const).std == 0)
    with pytest.raises(ValueError):
        chain_statistics(SampleChain("gibbs", 0, 0))
    with pytest.raises(ValueError):
        chain_statistics(chain, 3)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_samples=0)
    with pytest.raises(ValueError):
        SamplerConfig(burn_in=1.0)


def test_interval_problem_history_check(cg_setup):
    form, cat, prob = cg_setup
    with pytest.raises(ValueError):
        IntervalProblem(prob.red, [])
