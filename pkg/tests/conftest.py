import numpy as np
import pytest

from bayesms.coeff import CoefficientField, generate_channel_field, uniform_field
from bayesms.mesh import build_hierarchy


@pytest.fixture
def h8():
    """8x8 fine cells in a 2x2 coarse grid."""
    return build_hierarchy(8, 8, 2, 2)


@pytest.fixture
def h12():
    return build_hierarchy(12, 12, 3, 3)


@pytest.fixture
def channel12(h12):
    return generate_channel_field(h12, 1.0, 1000.0, 2, seed=3)


def random_field(h, seed, lo=1.0, hi=1000.0):
    """Log-uniform positive cell values."""
    rng = np.random.default_rng(seed)
    vals = np.exp(rng.uniform(np.log(lo), np.log(hi), h.n_cells))
    return CoefficientField(vals, h.nx_fine, h.ny_fine)


def unit(h):
    return uniform_field(h, 1.0)


def toy_gibbs_problem(sigma_scale=1.0):
    """Two scanned candidates on a tiny CG problem, with everything needed to
    enumerate the four-state sweep kernel exactly.

    Returns (problem, prior, cand_region, J, posterior, exact) where ``exact``
    maps a function ``flip(c, bits)`` giving the inclusion probability of
    candidate ``c`` given the other bits.
    """
    from bayesms.bayes import PosteriorSpec, PriorModel, gibbs_flip_probability
    from bayesms.fem import ParabolicCG
    from bayesms.gmsfem import BasisConfig, build_catalog
    from bayesms.sampler import IntervalProblem, ReducedOperators

    h = build_hierarchy(8, 8, 2, 2)
    f = generate_channel_field(h, 1.0, 100.0, 2, seed=5)
    form = ParabolicCG(h, f, 0.05)
    cat = build_catalog(form, 0.0, BasisConfig(1, 1, 2, seed=3))
    prob = IntervalProblem(ReducedOperators(form, cat, 0.0, 1), [np.zeros(form.ndof)])
    J = np.zeros(cat.n_regions, dtype=bool)
    J[[1, 4]] = True
    scan = np.flatnonzero(J[cat.cand_region])
    assert scan.size == 2
    p = np.full(cat.n_candidates, 0.5)
    p[scan] = (0.3, 0.6)
    cand_p = tuple(p[cat.cand_region == r] for r in range(cat.n_regions))
    prior = PriorModel(np.full(cat.n_regions, 0.5), cand_p, 1.0, 1.0)

    def bits_of(state):
        b = np.zeros(cat.n_candidates, dtype=bool)
        b[scan] = [(state >> k) & 1 for k in range(2)]
        return b

    r2 = {s: prob.evaluate(prob.active_from_bits(bits_of(s))).r2 for s in range(4)}
    sigma = sigma_scale * np.sqrt(max(abs(r2[0] - r2[3]), 1e-300))
    posterior = PosteriorSpec(sigma_L=sigma)

    def flip(k, state):
        other = bits_of(state)
        other[scan[k]] = False
        active = prob.active_from_bits(other)
        pen = prob.penalty(active, prob.red.n_fixed + scan[k])
        without, with_ = state & ~(1 << k), state | (1 << k)
        return gibbs_flip_probability(p[scan[k]], r2[without], r2[with_], pen, sigma)

    return prob, prior, cat.cand_region, J, posterior, scan, bits_of, flip


def exact_sweep_kernel(flip):
    """4x4 transition matrix of one systematic scan (candidate 0 then 1)."""
    P = np.eye(4)
    for k in range(2):
        Pk = np.zeros((4, 4))
        for s in range(4):
            q = flip(k, s)
            Pk[s, s | (1 << k)] += q
            Pk[s, s & ~(1 << k)] += 1 - q
        P = P @ Pk
    return P


ACCEPTANCE_LINES: list[str] = []


def acceptance_report(number: int, ok: bool, detail: str) -> None:
    """Record (and print) one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
