import numpy as np
import pytest

from bayesms.coeff import uniform_field
from bayesms.gmsfem import full_space_catalog
from bayesms.march import (Run, RunPlan, fixed_solution, make_formulation, run_posterior_fixed,
                           run_posterior_previous, well_source)
from bayesms.mesh import build_hierarchy

from conftest import random_field


def small_plan(formulation, **kw):
    base = dict(formulation=formulation, t_end=0.02, n_intervals=2, steps_per_interval=1,
                n_perm=1, n_candidates=2, p_bf=2, n_samples=3, n_sweeps=3)
    if formulation == "ipdg":
        base.update(t_end=0.02, steps_per_interval=2)
    base.update(kw)
    return RunPlan(**base)


@pytest.mark.parametrize("kind", ["cg", "mixed", "ipdg"])
def test_full_space_reproduces_fine_trajectory(kind, h8):
    f = random_field(h8, 1, 1e-3 if kind == "ipdg" else 1.0, 1.0 if kind == "ipdg" else 1e3)
    plan = small_plan(kind, n_intervals=3)
    form = make_formulation(plan, h8, f)
    run = Run(plan, h8, f, catalog=full_space_catalog(form))
    traj = run.fixed_solution()
    ref = run.reference()
    steps = traj.steps
    assert len(steps) == len(ref) - 1
    for x, r in zip(steps, ref[1:]):
        num = np.sqrt((x - r) @ run.form.mass @ (x - r))
        den = np.sqrt(r @ run.form.mass @ r)
        assert num <= 1e-10 * den


def test_zero_data_gives_zero_trajectory(h8):
    plan = small_plan("cg", source=0.0)
    traj = fixed_solution(plan, h8, random_field(h8, 2))
    assert all(np.all(s == 0) for s in traj.states)
    assert all(r == 0 for r in traj.residual_norms)


def test_wave_zero_data_all_samples_zero(h8):
    plan = small_plan("ipdg", initial="zero", source=0.0, sampler="gibbs")
    res = run_posterior_previous(plan, h8, uniform_field(h8, 1e-3))
    for r in res:
        assert np.all(r.chain.states() == 0)


def test_mixed_fixed_residual_nonzero(h8):
    plan = small_plan("mixed")
    traj = fixed_solution(plan, h8, random_field(h8, 3))
    assert all(r > 0 for r in traj.residual_norms)


def test_no_candidates_reproduces_fixed(h8):
    f = random_field(h8, 4)
    plan = small_plan("cg", n_candidates=0, sampler="sequential")
    run = Run(plan, h8, f)
    fixed = run.fixed_solution()
    res = run.run_posterior_fixed()
    for r, x in zip(res, fixed.states):
        for state in r.chain.states():
            np.testing.assert_array_equal(state, x)
        np.testing.assert_allclose(r.mean_state, x, rtol=1e-14)


@pytest.mark.parametrize("sampler", ["gibbs", "sequential"])
def test_posterior_fixed_runs(sampler, h8):
    plan = small_plan("cg", sampler=sampler)
    res = run_posterior_fixed(plan, h8, random_field(h8, 5))
    assert len(res) == 2
    for r in res:
        assert np.isfinite(r.mean_error) and r.mean_error >= 0
        assert r.J.sum() == max(1, int(np.ceil(0.3 * r.J.size)))
        n = plan.n_sweeps if sampler == "gibbs" else plan.n_samples
        assert len(r.chain) == n


@pytest.mark.parametrize("sampler", ["gibbs", "sequential"])
def test_posterior_previous_runs(sampler, h8):
    plan = small_plan("ipdg", sampler=sampler)
    res = run_posterior_previous(plan, h8, uniform_field(h8, 1e-3))
    assert [r.interval for r in res] == [0, 1]
    assert all(np.isfinite(r.mean_error) for r in res)


def test_probabilistic_region_mode(h8):
    plan = small_plan("cg", region_mode="probabilistic", n_omega=2)
    res = run_posterior_fixed(plan, h8, random_field(h8, 6))
    assert all(np.all((r.prior.region_p >= 0) & (r.prior.region_p <= 1)) for r in res)


def test_run_plan_defaults_and_validation():
    p = RunPlan(formulation="ipdg")
    assert p.posterior == "around_previous" and p.initial == "bump" and p.source == 0.0
    assert RunPlan(formulation="mixed").source == "wells"
    assert RunPlan().dt == pytest.approx(0.01)
    bad = [dict(formulation="fem"), dict(sampler="mh"), dict(region_fraction=(0.0,)),
           dict(t_end=-1.0), dict(n_basis=0.5), dict(source="lake"), dict(initial="hot"),
           dict(posterior="x"), dict(region_mode="x"), dict(n_sweeps=0)]
    for kw in bad:
        with pytest.raises(ValueError):
            RunPlan(**kw)
    assert RunPlan(region_fraction=0.25).region_fraction == (0.25,)
    assert RunPlan(region_fraction=(0.25, 0.55)).fraction(5) == 0.55


def test_well_source_balance():
    h = build_hierarchy(8, 8, 2, 2)
    cells = well_source(h, "mixed")
    assert cells.sum() == 0 and cells.max() == 1 and cells.min() == -1
    assert well_source(h, "ipdg").size == 4 * h.n_cells
    assert well_source(h, "cg").size == h.interior_nodes.size
