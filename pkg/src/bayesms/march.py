"""Time marching: fine reference, permanent-basis trajectory and the two posterior variants."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .bayes import PosteriorSpec, PriorModel, basis_prior, region_prior
from .coeff import CoefficientField
from .diagnostics import relative_l2
from .fem import ParabolicCG, ParabolicMixed, WaveIPDG, nodal_to_dg
from .gmsfem import BasisCatalog, BasisConfig, build_catalog
from .mesh import MeshHierarchy
from .residual import ResidualVector, region_norms
from .sampler import (IntervalProblem, ReducedOperators, SampleChain, SamplerConfig,
                      burn_in_records, gibbs_sample, sequential_sample)

log = logging.getLogger(__name__)

FORMULATIONS = ("cg", "mixed", "ipdg")


@dataclass
class RunPlan:
    """Everything a run needs besides the mesh and the coefficient."""

    formulation: str = "cg"
    t_end: float = 0.02
    n_intervals: int = 2
    steps_per_interval: int = 1
    posterior: str | None = None          # around_fixed | around_previous
    sampler: str = "gibbs"                # gibbs | sequential
    n_samples: int = 20
    n_sweeps: int = 30
    burn_in: float = 0.25
    n_omega: float | None = None
    n_basis: float = 2.0
    sigma_L: float = 1e-3
    sigma_d: float | None = None
    region_mode: str = "top"              # top | probabilistic
    region_fraction: Sequence[float] = (0.3,)
    seed: int = 0
    n_perm: int = 2
    n_candidates: int = 8
    p_bf: int = 4
    layers: int = 1
    gamma: float = 10.0
    source: float | str | None = None     # constant value or "wells"
    initial: str | None = None            # zero | bump

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}, got {self.formulation!r}")
        if self.posterior is None:
            self.posterior = "around_previous" if self.formulation == "ipdg" else "around_fixed"
        if self.posterior not in ("around_fixed", "around_previous"):
            raise ValueError(f"unknown posterior variant {self.posterior!r}")
        if self.sampler not in ("gibbs", "sequential"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.region_mode not in ("top", "probabilistic"):
            raise ValueError(f"unknown region mode {self.region_mode!r}")
        if isinstance(self.region_fraction, (int, float)):
            self.region_fraction = (float(self.region_fraction),)
        self.region_fraction = tuple(float(r) for r in self.region_fraction)
        if not self.region_fraction or any(not 0 < r <= 1 for r in self.region_fraction):
            raise ValueError("region fractions must lie in (0, 1]")
        if self.t_end <= 0 or self.n_intervals < 1 or self.steps_per_interval < 1:
            raise ValueError("t_end, n_intervals and steps_per_interval must be positive")
        if self.n_basis < 1 or (self.n_omega is not None and self.n_omega < 1):
            raise ValueError("prior budgets must be >= 1")
        if self.source is None:
            self.source = {"cg": 1.0, "mixed": "wells", "ipdg": 0.0}[self.formulation]
        if isinstance(self.source, str) and self.source != "wells":
            raise ValueError(f"unknown source {self.source!r}")
        if self.initial is None:
            self.initial = "bump" if self.formulation == "ipdg" else "zero"
        if self.initial not in ("zero", "bump"):
            raise ValueError(f"unknown initial condition {self.initial!r}")
        self.sampler_config()   # validates counts

    @property
    def dt(self) -> float:
        return self.t_end / (self.n_intervals * self.steps_per_interval)

    @property
    def interval_length(self) -> float:
        return self.t_end / self.n_intervals

    def fraction(self, n: int) -> float:
        return self.region_fraction[min(n, len(self.region_fraction) - 1)]

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.n_samples, self.n_sweeps, self.burn_in)

    def basis_config(self) -> BasisConfig:
        return BasisConfig(self.n_perm, self.n_candidates, self.p_bf, self.layers, self.seed)

    def posterior_spec(self) -> PosteriorSpec:
        return PosteriorSpec(self.posterior, self.sigma_L)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["region_fraction"] = list(self.region_fraction)
        return d


@dataclass
class IntervalResult:
    interval: int
    t: float
    chain: SampleChain
    prior: PriorModel
    J: np.ndarray
    reference: np.ndarray
    anchor_residual: float
    mean_state: np.ndarray
    mean_error: float
    snapshot_error: float = float("nan")


@dataclass
class FixedTrajectory:
    states: list                 # fine state at every interval end
    residual_norms: list
    steps: list = field(default_factory=list)   # every fine step


def bump(hierarchy: MeshHierarchy, center=(0.5, 0.5), width: float = 0.1) -> np.ndarray:
    xy = hierarchy.node_coords
    cx, cy = center[0] * hierarchy.Lx, center[1] * hierarchy.Ly
    return np.exp(-((xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2) / width ** 2)


class Run:
    """A plan bound to a mesh and coefficient, with cached catalogs and reductions."""

    def __init__(self, plan: RunPlan, hierarchy: MeshHierarchy, field: CoefficientField,
                 catalog: BasisCatalog | None = None):
        self.plan = plan
        self.hierarchy = hierarchy
        self.field = field
        self.form = make_formulation(plan, hierarchy, field)
        self._catalogs: dict = {}
        self._reduced: dict = {}
        self._reference = None
        self._snapshot = None
        if catalog is not None:
            self._catalogs[self._catalog_key(0)] = catalog
        mask = np.zeros(self.form.ndof)
        mask[self.form.residual_rows if self.plan.formulation == "mixed" else slice(None)] = 1.0
        D = sp.diags(mask)
        self.error_mass = (D @ self.form.mass @ D).tocsr()

    # -- basis -------------------------------------------------------------
    def interval_start(self, n: int) -> float:
        return n * self.plan.interval_length

    def _catalog_key(self, n: int):
        return 0 if self.field.time_law is None else n

    def catalog(self, n: int = 0) -> BasisCatalog:
        key = self._catalog_key(n)
        if key not in self._catalogs:
            log.info("building basis catalog for interval %d", n)
            self._catalogs[key] = build_catalog(self.form, self.interval_start(n),
                                                self.plan.basis_config(), interval_tag=key)
        return self._catalogs[key]

    def reduced(self, n: int) -> ReducedOperators:
        if n not in self._reduced:
            self._reduced[n] = ReducedOperators(self.form, self.catalog(n), self.interval_start(n),
                                                self.plan.steps_per_interval)
        return self._reduced[n]

    # -- trajectories ------------------------------------------------------
    def initial_history(self) -> list[np.ndarray]:
        h = self.hierarchy
        form = self.form
        if self.plan.initial == "zero":
            u0 = np.zeros(form.ndof)
        elif isinstance(form, ParabolicCG):
            u0 = bump(h)[form.free]
        elif isinstance(form, WaveIPDG):
            u0 = nodal_to_dg(h, bump(h))
        else:
            raise ValueError("the mixed form starts from rest only")
        # zero initial velocity for the wave: both history levels equal u0
        return [u0.copy() for _ in range(form.n_history)]

    def reference(self) -> list[np.ndarray]:
        """Fine oracle states at every fine step (index 0 = initial)."""
        if self._reference is None:
            hist = self.initial_history()
            n_total = self.plan.n_intervals * self.plan.steps_per_interval
            states = self.form.fine_march(hist, 0.0, n_total)
            self._reference = [hist[0]] + states
        return self._reference

    def reference_at_interval(self, n: int) -> np.ndarray:
        """Fine state at the right end of interval ``n``."""
        return self.reference()[(n + 1) * self.plan.steps_per_interval]

    def error(self, state, reference) -> float:
        return relative_l2(state, reference, self.error_mass)

    def fixed_solution(self) -> FixedTrajectory:
        hist = self.initial_history()
        traj = FixedTrajectory([], [], [])
        for n in range(self.plan.n_intervals):
            prob = IntervalProblem(self.reduced(n), hist)
            ev = prob.evaluate(prob.red.fixed_index)
            traj.states.append(prob.fine_state(ev))
            traj.residual_norms.append(float(np.sqrt(ev.r2)))
            traj.steps.extend(prob.fine_state(ev, s) for s in range(prob.n_steps))
            hist = prob.fine_history(ev)
        return traj

    def snapshot_trajectory(self) -> list[np.ndarray]:
        """Galerkin states with every candidate of the top-ranked regions switched on.

        This is the snapshot-space solution in the regions being updated. It
        starts each interval from the permanent-basis history (around-fixed
        variant) or from its own previous state (around-previous variant).
        """
        if self._snapshot is None:
            hist = self.initial_history()
            out = []
            for n in range(self.plan.n_intervals):
                prob = IntervalProblem(self.reduced(n), hist)
                anchor = prob.evaluate(prob.red.fixed_index)
                _, J_top = self.prior_for(prob, anchor, n)
                bits = J_top[prob.red.catalog.cand_region]
                ev = prob.evaluate(prob.active_from_bits(bits))
                out.append(prob.fine_state(ev))
                hist = prob.fine_history(anchor if self.plan.posterior == "around_fixed" else ev)
            self._snapshot = out
        return self._snapshot

    # -- priors ------------------------------------------------------------
    def prior_for(self, prob: IntervalProblem, anchor, n: int) -> tuple[PriorModel, np.ndarray]:
        """Region and candidate priors from the anchor residual; also the top-fraction region set."""
        cat = prob.red.catalog
        res = ResidualVector(anchor.residual, cat.test_region, cat.n_regions, n)
        if isinstance(self.form, WaveIPDG):
            norms = region_norms(res, _TestView(prob.red.Psi, cat), self.form.mass)
            ranking = norms.sup
        else:
            norms = region_norms(res)
            ranking = norms.local
        n_reg = cat.n_regions
        frac = self.plan.fraction(n)
        n_omega = self.plan.n_omega if self.plan.n_omega is not None else \
            max(1, math.ceil(frac * n_reg))
        global_rank = float(np.sqrt(np.sum(ranking ** 2)))
        p_region = region_prior(ranking, global_rank, n_omega)
        n_top = max(1, math.ceil(frac * n_reg))
        # stable sort: ties keep ascending region order
        top = np.argsort(-ranking, kind="stable")[:n_top]
        J_top = np.zeros(n_reg, dtype=bool)
        J_top[top] = True
        images = prob.red.candidate_images(-1)
        final = anchor.residual[-1]
        cand_p = []
        for r in range(n_reg):
            cands = cat.region_candidates(r)
            if cands.size == 0:
                cand_p.append(np.zeros(0))
                continue
            rows = cat.test_region == r
            cand_p.append(basis_prior(final[rows], images[np.ix_(rows, cands)], self.plan.n_basis))
        prior = PriorModel(p_region, tuple(cand_p), n_omega, self.plan.n_basis,
                           local_norms=ranking, global_norm=global_rank)
        return prior, J_top

    # -- posteriors --------------------------------------------------------
    def _run_sampler(self, prob, prior, J_top, n, reference, init_bits=None, indices=None):
        cat = prob.red.catalog
        J = J_top if self.plan.region_mode == "top" else None
        cfg = self.plan.sampler_config()
        if self.plan.sampler == "sequential":
            return sequential_sample(prob, prior, cat.cand_region, cfg, self.plan.seed, n, J,
                                     reference, self.error, indices=indices)
        return gibbs_sample(prob, prior, cat.cand_region, self.plan.posterior_spec(), cfg,
                            self.plan.seed, n, J, init_bits, reference, self.error)

    def _summarize(self, n, chain, prior, J, reference, anchor_norm) -> IntervalResult:
        burn = self.plan.burn_in if chain.method == "gibbs" else 0.0
        recs = burn_in_records(chain, burn)
        mean = np.mean([r.state for r in recs], axis=0)
        snap = self.error(mean, self.snapshot_trajectory()[n])
        return IntervalResult(n, self.interval_start(n + 1), chain, prior, J, reference,
                              anchor_norm, mean, self.error(mean, reference), snap)

    def run_posterior_fixed(self) -> list[IntervalResult]:
        """Samples of every interval around the permanent-basis trajectory."""
        hist = self.initial_history()
        out = []
        for n in range(self.plan.n_intervals):
            prob = IntervalProblem(self.reduced(n), hist)
            anchor = prob.evaluate(prob.red.fixed_index)
            prior, J = self.prior_for(prob, anchor, n)
            ref = self.reference_at_interval(n)
            chain = self._run_sampler(prob, prior, J, n, ref)
            out.append(self._summarize(n, chain, prior, J, ref, float(np.sqrt(anchor.r2))))
            hist = prob.fine_history(anchor)
        return out

    def run_posterior_previous(self) -> list[IntervalResult]:
        """Each realization (sequential) or the chain (Gibbs) carries its own trajectory."""
        if self.plan.sampler == "gibbs":
            hist = self.initial_history()
            out = []
            bits = None
            for n in range(self.plan.n_intervals):
                prob = IntervalProblem(self.reduced(n), hist)
                anchor = prob.evaluate(prob.red.fixed_index)
                prior, J = self.prior_for(prob, anchor, n)
                ref = self.reference_at_interval(n)
                same_catalog = n > 0 and self._catalog_key(n) == self._catalog_key(n - 1)
                chain = self._run_sampler(prob, prior, J, n, ref,
                                          init_bits=bits if same_catalog else None)
                out.append(self._summarize(n, chain, prior, J, ref, float(np.sqrt(anchor.r2))))
                last = chain.records[-1]
                hist = last.history
                bits = last.selection.I
            return out
        n_real = self.plan.n_samples
        hists = [self.initial_history() for _ in range(n_real)]
        out = []
        for n in range(self.plan.n_intervals):
            ref = self.reference_at_interval(n)
            chain = SampleChain("sequential", self.plan.seed, n)
            priors, anchors = [], []
            for i in range(n_real):
                prob = IntervalProblem(self.reduced(n), hists[i])
                anchor = prob.evaluate(prob.red.fixed_index)
                prior, J = self.prior_for(prob, anchor, n)
                sub = self._run_sampler(prob, prior, J, n, ref, indices=[i])
                rec = sub.records[0]
                chain.records.append(rec)
                hists[i] = rec.history
                priors.append(prior)
                anchors.append(float(np.sqrt(anchor.r2)))
            out.append(self._summarize(n, chain, priors[0], J, ref, float(np.mean(anchors))))
        return out

    def run(self) -> list[IntervalResult]:
        if self.plan.posterior == "around_fixed":
            return self.run_posterior_fixed()
        return self.run_posterior_previous()


@dataclass
class _TestView:
    """Adapter exposing the projected test columns to :func:`region_norms`."""

    columns: sp.csc_matrix
    catalog: BasisCatalog

    @property
    def region(self):
        return self.catalog.test_region

    @property
    def n_regions(self):
        return self.catalog.n_regions


def well_source(hierarchy: MeshHierarchy, formulation: str) -> np.ndarray:
    """Injection (+1) in the first coarse block, production (-1) in the last.

    Values are per fine cell for the mixed form, per node for CG (free nodes
    only) and per DG dof for IPDG.
    """
    h = hierarchy
    cells = np.zeros(h.nx_fine * h.ny_fine)
    cells[h.block_cells[0]] = 1.0
    cells[h.block_cells[h.n_blocks - 1]] = -1.0
    if formulation == "mixed":
        return cells
    if formulation == "ipdg":
        return np.repeat(cells, 4)
    nodal = np.zeros(h.n_nodes)
    counts = np.zeros(h.n_nodes)
    np.add.at(nodal, h.cell_nodes, cells[:, None])
    np.add.at(counts, h.cell_nodes, 1.0)
    return (nodal / counts)[h.interior_nodes]


def make_formulation(plan: RunPlan, hierarchy: MeshHierarchy, field: CoefficientField):
    src = well_source(hierarchy, plan.formulation) if plan.source == "wells" else plan.source
    if plan.formulation == "cg":
        return ParabolicCG(hierarchy, field, plan.dt, source=src)
    if plan.formulation == "mixed":
        return ParabolicMixed(hierarchy, field, plan.dt, source=src)
    return WaveIPDG(hierarchy, field, plan.dt, source=src, gamma=plan.gamma)


def fixed_solution(plan: RunPlan, hierarchy: MeshHierarchy, field: CoefficientField,
                   catalog: BasisCatalog | None = None) -> FixedTrajectory:
    return Run(plan, hierarchy, field, catalog).fixed_solution()


def run_posterior_fixed(plan, hierarchy, field, catalog=None) -> list[IntervalResult]:
    return Run(plan, hierarchy, field, catalog).run_posterior_fixed()


def run_posterior_previous(plan, hierarchy, field, catalog=None) -> list[IntervalResult]:
    return Run(plan, hierarchy, field, catalog).run_posterior_previous()
