"""Sequential (prior-draw) and Gibbs sampling over basis selections.

Each coarse interval is reduced once: the step operators of every fine step
in the interval are projected onto all trial columns (permanent, auxiliary
and candidate) and onto the test columns. Evaluating a selection then only
involves dense matrices of the size of the active set.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bayes import PosteriorSpec, PriorModel, flip_log_odds, gram_penalty_from_gram, \
    log_data_factor
from .fem import SolverError
from .util import rng_for

log = logging.getLogger(__name__)

DENSE_LIMIT = 3000
DEPENDENCE_TOL = 1e-10
QUADRATIC_FLOOR = 1e-8


def _dense_or_sparse(mat, dense: bool):
    if dense:
        return np.asarray(mat.todense()) if sp.issparse(mat) else np.asarray(mat)
    return sp.csc_matrix(mat)


class ReducedOperators:
    """One interval's step operators projected onto a catalog.

    Parameters
    ----------
    form : Formulation
    catalog : BasisCatalog
    t0 : float
        Left end of the interval; step ``s`` ends at ``t0 + s * dt``.
    n_steps : int
        Fine steps in the interval.
    """

    def __init__(self, form, catalog, t0: float, n_steps: int):
        self.form = form
        self.catalog = catalog
        self.t0 = float(t0)
        self.n_steps = int(n_steps)
        self.n_fixed = catalog.n_fixed
        self.n_cand = catalog.n_candidates
        self.K = self.n_fixed + self.n_cand
        self.dense = self.K <= DENSE_LIMIT
        Phi = catalog.trial().tocsc()
        rows = np.zeros(form.ndof, dtype=bool)
        rows[form.residual_rows] = True
        Psi = sp.csc_matrix(sp.diags(rows.astype(float)) @ catalog.test) * form.residual_sign
        self.Phi, self.Psi = Phi, Psi
        self.m = Psi.shape[1]
        self.ops = []           # per step index into self.blocks
        self.blocks = []
        # expanded quadratic forms lose ~cond(W)^2 relative accuracy; the wave
        # operators (scaled by 1/dt^2) are too ill-conditioned for that
        self.dense_quadratic = (self.dense and form.field.time_law is None
                                and form.n_history == 1)
        seen = {}
        for s in range(1, self.n_steps + 1):
            op = form.operator(self.t0 + s * form.dt)
            key = (id(op.lhs),) + tuple(id(H) for H in op.history)
            if key not in seen:
                seen[key] = len(self.blocks)
                self.blocks.append(self._project(op))
            self.ops.append((seen[key], op))
        self.step_groups: dict = {}
        for i, (b_idx, _) in enumerate(self.ops):
            self.step_groups.setdefault(b_idx, []).append(i)
        self.step_groups = {b: np.array(v) for b, v in self.step_groups.items()}
        # quadratic-form residuals pay off only when few distinct operators occur
        self.quadratic = self.dense_quadratic and len(self.blocks) <= 2
        self.loads_g = [Phi.T @ op.load for _, op in self.ops]
        self.loads_r = [Psi.T @ op.load for _, op in self.ops]
        if self.dense:
            G = np.asarray((Phi.T @ (form.mass @ Phi)).todense())
            d = np.sqrt(np.clip(np.diag(G), 1e-300, None))
            self.gram = G / np.outer(d, d)
        else:
            self.gram = None

    def _project(self, op):
        Phi, Psi = self.Phi, self.Psi
        LG = _dense_or_sparse(Phi.T @ op.lhs @ Phi, self.dense)
        LR = np.asarray((Psi.T @ op.lhs @ Phi).todense()) if self.dense \
            else sp.csr_matrix(Psi.T @ op.lhs @ Phi)
        HG = [_dense_or_sparse(Phi.T @ H @ Phi, self.dense) for H in op.history]
        HR = [np.asarray((Psi.T @ H @ Phi).todense()) if self.dense
              else sp.csr_matrix(Psi.T @ H @ Phi) for H in op.history]
        blk = {"LG": LG, "LR": LR, "HG": HG, "HR": HR, "op": op}
        if self.dense_quadratic:
            # residual of a step is sum_a W[a] z_a - c with z = (x_s, x_{s-1}, ...)
            W = [LR] + [-H for H in HR]
            blk["W"] = W
            blk["Q"] = [[W[a].T @ W[b] for b in range(len(W))] for a in range(len(W))]
            blk["Qdiag"] = [np.diag(blk["Q"][a][a]).copy() for a in range(len(W))]
        return blk

    @property
    def fixed_index(self) -> np.ndarray:
        return np.arange(self.n_fixed)

    def candidate_images(self, step: int = -1) -> np.ndarray:
        """Test-coordinate image of every candidate under the step's left-hand side."""
        b = self.blocks[self.ops[step][0]]
        LR = b["LR"]
        sl = slice(self.n_fixed, self.K)
        return LR[:, sl] if self.dense else LR[:, sl].toarray()


class Evaluation:
    """Reduced solution of one active set over all steps of an interval.

    ``X`` holds full-width trial coefficients (zero outside ``active``), one
    row per step. The stacked test residual is built on first access.
    """

    def __init__(self, problem: "IntervalProblem", active: np.ndarray, X: np.ndarray,
                 r2: float | None = None):
        self.problem = problem
        self.active = active
        self.X = X
        self._residual = None
        self._r2 = r2

    @property
    def betas(self) -> list:
        return [row[self.active] for row in self.X]

    @property
    def residual(self) -> np.ndarray:
        """(n_steps, n_test) residual in test coordinates."""
        if self._residual is None:
            self._residual = self.problem.residual_of(self.X)
        return self._residual

    @property
    def r2(self) -> float:
        if self._r2 is None:
            R = self.residual
            self._r2 = float(np.sum(R * R))
        return self._r2

    def state(self, phi: sp.csc_matrix, step: int = -1) -> np.ndarray:
        return phi[:, self.active] @ self.X[step, self.active]


class IntervalProblem:
    """Reduced operators plus the fine history the interval starts from.

    ``history`` is most recent first and has ``form.n_history`` entries.
    """

    def __init__(self, reduced: ReducedOperators, history):
        self.red = reduced
        hist = [np.asarray(h, dtype=float) for h in history]
        if len(hist) != reduced.form.n_history:
            raise ValueError(f"expected {reduced.form.n_history} history states, got {len(hist)}")
        self.history = hist
        Phi, Psi = reduced.Phi, reduced.Psi
        n_h = len(hist)
        self.const_g, self.const_r = [], []
        for s in range(1, reduced.n_steps + 1):
            b_idx, op = reduced.ops[s - 1]
            g = np.array(reduced.loads_g[s - 1], dtype=float)
            r = np.array(reduced.loads_r[s - 1], dtype=float)
            for k in range(n_h):
                j = s - 1 - k          # index of the past state; <= 0 lives in the fine history
                if j <= 0:
                    Hx = op.history[k] @ hist[-j]
                    g += Phi.T @ Hx
                    r += Psi.T @ Hx
            self.const_g.append(g)
            self.const_r.append(r)
        self.const_r = np.array(self.const_r).reshape(reduced.n_steps, reduced.m)
        if reduced.quadratic:
            self.wc = np.empty((reduced.n_steps, n_h + 1, reduced.K))
            for i, (b_idx, _) in enumerate(reduced.ops):
                for a, W in enumerate(reduced.blocks[b_idx]["W"]):
                    self.wc[i, a] = W.T @ self.const_r[i]
            self.cc = float(np.sum(self.const_r ** 2))
        self._cache: dict = {}
        self._pen_cache: dict = {}

    @property
    def n_steps(self) -> int:
        return self.red.n_steps

    def _factor(self, mat):
        if self.red.dense:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                try:
                    lu = sla.lu_factor(mat, check_finite=False)
                except (sla.LinAlgWarning, ValueError) as exc:
                    raise SolverError(f"ill-conditioned reduced system: {exc}") from exc
            if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0:
                raise SolverError("singular reduced system")
            return lambda b: sla.lu_solve(lu, b, check_finite=False)
        try:
            return spla.splu(sp.csc_matrix(mat)).solve
        except RuntimeError as exc:
            raise SolverError(f"singular reduced system: {exc}") from exc

    def evaluate(self, active) -> Evaluation:
        """Galerkin solve on the active trial columns and the stacked test residual."""
        S = np.asarray(active, dtype=np.int64)
        key = S.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        red = self.red
        n, n_h = red.n_steps, len(self.history)
        # full-width coefficients, zero outside S, one row per step
        X = np.zeros((n, red.K))
        facs, hist_ops = {}, {}
        for s in range(1, n + 1):
            b_idx = red.ops[s - 1][0]
            if b_idx not in facs:
                blk = red.blocks[b_idx]
                sub = (lambda A: A[np.ix_(S, S)]) if red.dense else (lambda A: A[S][:, S])
                facs[b_idx] = self._factor(sub(blk["LG"]))
                hist_ops[b_idx] = [sub(H) for H in blk["HG"]] if n > 1 else []
            rhs = self.const_g[s - 1][S].copy()
            for k in range(n_h):
                j = s - 1 - k
                if j >= 1:
                    rhs += hist_ops[b_idx][k] @ X[j - 1, S]
            beta = facs[b_idx](rhs)
            if not np.all(np.isfinite(beta)):
                raise SolverError("non-finite reduced solution")
            X[s - 1, S] = beta
        r2, scale = self._quadratic_r2(X, S) if red.quadratic else (None, 0.0)
        if r2 is not None and r2 > QUADRATIC_FLOOR * scale:
            ev = Evaluation(self, S, X, r2)
        else:
            # near-exact fits lose all digits to cancellation in the expanded form
            ev = Evaluation(self, S, X)
            ev._residual = self.residual_of(X, S)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = ev
        return ev

    def _shifted(self, X: np.ndarray) -> list[np.ndarray]:
        """``z_a`` rows per step: the state ``a`` steps back (zero where it is fine history)."""
        n = X.shape[0]
        out = [X]
        for k in range(len(self.history)):
            Xk = np.zeros_like(X)
            Xk[1 + k:] = X[:n - 1 - k]
            out.append(Xk)
        return out

    def residual_of(self, X: np.ndarray, S: np.ndarray | None = None) -> np.ndarray:
        """Stacked residual of full-width coefficients ``X``; ``S`` restricts the columns used."""
        red = self.red
        Z = self._shifted(X)
        R = -self.const_r.copy()
        if S is None or not red.dense:
            cols = slice(None)
        else:
            cols = S
        for b_idx, steps in red.step_groups.items():
            blk = red.blocks[b_idx]
            LR = blk["LR"][:, cols]
            R[steps] += (LR @ X[steps][:, cols].T).T
            for k, H in enumerate(blk["HR"]):
                R[steps] -= (H[:, cols] @ Z[k + 1][steps][:, cols].T).T
        return R

    def _quadratic_r2(self, X: np.ndarray, S: np.ndarray) -> tuple[float, float]:
        """Expanded ``|R|^2`` and the size its terms would have without cancellation."""
        red = self.red
        Z = [z[:, S] for z in self._shifted(X)]
        total = self.cc
        scale = self.cc
        for b_idx, steps in red.step_groups.items():
            blk = red.blocks[b_idx]
            Q = blk["Q"]
            for a in range(len(Z)):
                za = Z[a][steps]
                lin = 2.0 * float(np.sum(za * self.wc[steps, a][:, S]))
                total -= lin
                scale += abs(lin) + float(np.sum(za * za * blk["Qdiag"][a][S]))
                for b in range(a, len(Z)):
                    q = np.sum((za @ Q[a][b][np.ix_(S, S)]) * Z[b][steps])
                    total += q if a == b else 2.0 * q
        return max(float(total), 0.0), scale

    def active_from_bits(self, bits: np.ndarray) -> np.ndarray:
        return np.concatenate([self.red.fixed_index,
                               self.red.n_fixed + np.flatnonzero(bits)]).astype(np.int64)

    def penalty(self, active: np.ndarray, k: int) -> float:
        """Gram penalty of trial column ``k`` against ``active`` (which excludes ``k``)."""
        G = self.red.gram
        if G is None:
            return 1.0
        key = (np.asarray(active, dtype=np.int64).tobytes(), int(k))
        val = self._pen_cache.get(key)
        if val is None:
            val = gram_penalty_from_gram(G[np.ix_(active, active)], G[active, k])
            if len(self._pen_cache) > 16384:
                self._pen_cache.clear()
            self._pen_cache[key] = val
        return val

    def fine_state(self, ev: Evaluation, step: int = -1) -> np.ndarray:
        return ev.state(self.red.Phi, step)

    def fine_history(self, ev: Evaluation) -> list[np.ndarray]:
        """Trailing states of the interval, most recent first (next interval's history)."""
        n_h = len(self.history)
        states = [self.fine_state(ev, s) for s in range(-1, -min(n_h, self.n_steps) - 1, -1)]
        if len(states) < n_h:
            states += self.history[: n_h - len(states)]
        return states


def solve_beta(problem: IntervalProblem, active) -> Evaluation:
    """Galerkin solve of every step in the interval on the given trial columns."""
    active = np.asarray(active, dtype=np.int64)
    if active.size == 0:
        raise ValueError("active basis is empty")
    return problem.evaluate(np.sort(active))


# ---------------------------------------------------------------------------
# Selections and chains
# ---------------------------------------------------------------------------
@dataclass
class BasisSelection:
    J: np.ndarray          # region bits
    I: np.ndarray          # candidate bits (catalog order)
    beta: np.ndarray       # final-step coefficients over ``active``
    active: np.ndarray

    @property
    def n_candidates(self) -> int:
        return int(self.I.sum())


@dataclass
class SampleRecord:
    selection: BasisSelection
    residual_norm: float
    state: np.ndarray
    history: list
    error: float | None = None


@dataclass
class SampleChain:
    method: str
    seed: int
    interval: int
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records])

    def residual_norms(self) -> np.ndarray:
        return np.array([r.residual_norm for r in self.records])

    def counts(self) -> np.ndarray:
        return np.array([r.selection.n_candidates for r in self.records])

    def errors(self) -> np.ndarray:
        return np.array([np.nan if r.error is None else r.error for r in self.records])


@dataclass
class SamplerConfig:
    n_samples: int = 20
    n_sweeps: int = 30
    burn_in: float = 0.25

    def __post_init__(self):
        if self.n_samples < 1 or self.n_sweeps < 1:
            raise ValueError("sample and sweep counts must be >= 1")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn_in must lie in [0, 1)")


def _draw_regions(prior: PriorModel, rng, J_fixed):
    if J_fixed is not None:
        return np.asarray(J_fixed, dtype=bool).copy()
    return rng.random(prior.region_p.size) < prior.region_p


def _draw_candidates(prior: PriorModel, cand_region: np.ndarray, J: np.ndarray, rng):
    p = prior.flat_candidate_p()
    return (rng.random(p.size) < p) & J[cand_region]


def _prune_dependent(problem: IntervalProblem, bits: np.ndarray) -> np.ndarray:
    """Drop candidates numerically dependent on the columns accepted before them."""
    if problem.red.gram is None or not bits.any():
        return bits
    bits = bits.copy()
    accepted = list(problem.red.fixed_index)
    for c in np.flatnonzero(bits):
        k = problem.red.n_fixed + c
        if problem.penalty(np.array(accepted), k) < DEPENDENCE_TOL:
            log.info("dropping candidate %d: linearly dependent on the active set", c)
            bits[c] = False
        else:
            accepted.append(k)
    return bits


def _record(problem, bits, J, ev, reference=None, error_fn=None) -> SampleRecord:
    state = problem.fine_state(ev)
    err = None if reference is None or error_fn is None else error_fn(state, reference)
    sel = BasisSelection(J.copy(), bits.copy(), ev.betas[-1].copy(), ev.active.copy())
    return SampleRecord(sel, float(np.sqrt(ev.r2)), state, problem.fine_history(ev), err)


def sequential_sample(problem: IntervalProblem, prior: PriorModel, cand_region: np.ndarray,
                      config: SamplerConfig, seed: int, interval: int = 0, J_fixed=None,
                      reference=None, error_fn=None, indices=None) -> SampleChain:
    """Independent prior draws of (J, I), each followed by a Galerkin solve.

    Realization ``i`` draws from its own stream derived from ``seed``;
    ``indices`` selects which realizations to run (default all).
    """
    chain = SampleChain("sequential", seed, interval)
    for i in (range(config.n_samples) if indices is None else indices):
        rng = rng_for(seed, f"sequential:{interval}", i)
        J = _draw_regions(prior, rng, J_fixed)
        bits = _prune_dependent(problem, _draw_candidates(prior, cand_region, J, rng))
        if not bits.any():
            log.debug("realization %d selected no candidates; using the permanent basis", i)
        ev = problem.evaluate(problem.active_from_bits(bits))
        chain.records.append(_record(problem, bits, J, ev, reference, error_fn))
    return chain


def _data_term(problem, active, beta, posterior: PosteriorSpec | None) -> float:
    if posterior is None or not posterior.has_data:
        return 0.0
    pred = problem.red.Phi[posterior.obs_index][:, active] @ beta
    return log_data_factor(pred, posterior.observed, posterior.sigma_d)


@dataclass
class _Proposal:
    k: int
    add: bool
    r2: float
    active: np.ndarray
    beta: np.ndarray
    payload: object = None


class _FullTracker:
    """Current selection; every proposal is a fresh reduced solve (any step count)."""

    def __init__(self, problem: IntervalProblem, bits: np.ndarray):
        self.problem = problem
        self.bits = bits.copy()
        self.ev = problem.evaluate(problem.active_from_bits(self.bits))

    def refresh(self):
        pass

    @property
    def r2(self) -> float:
        return self.ev.r2

    @property
    def active(self):
        return self.ev.active

    @property
    def beta(self):
        return self.ev.betas[-1]

    def penalty(self, k: int) -> float:
        c = k - self.problem.red.n_fixed
        without = self.bits.copy()
        without[c] = False
        return self.problem.penalty(self.problem.active_from_bits(without), k)

    def propose(self, k: int, add: bool) -> _Proposal:
        c = k - self.problem.red.n_fixed
        bits = self.bits.copy()
        bits[c] = add
        ev = self.problem.evaluate(self.problem.active_from_bits(bits))
        return _Proposal(k, add, ev.r2, ev.active, ev.betas[-1], (bits, ev))

    def accept(self, prop: _Proposal):
        self.bits, self.ev = prop.payload


class _BorderedTracker:
    """Single-step selection kept as explicit inverses, updated by bordering.

    Adding or removing one column costs O(|S|^2 + m |S|) instead of a fresh
    factorization. Inverses are rebuilt from scratch by :meth:`refresh`.
    """

    SINGULAR_TOL = 1e-12

    def __init__(self, problem: IntervalProblem, bits: np.ndarray):
        red = problem.red
        blk = red.blocks[red.ops[0][0]]
        self.problem = problem
        self.G = blk["LG"]
        self.LR = blk["LR"]
        self.b = problem.const_g[0]
        self.c = problem.const_r[0]
        self.gram = red.gram
        self.S = problem.active_from_bits(bits)
        self.refresh()

    def refresh(self):
        S = self.S
        fac = self.problem._factor(self.G[np.ix_(S, S)])
        self.Ginv = fac(np.eye(S.size))
        self.x = self.Ginv @ self.b[S]
        self.LRS = self.LR[:, S]
        self.R = self.LRS @ self.x - self.c
        try:
            self.Pinv = np.linalg.inv(self.gram[np.ix_(S, S)])
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Gram matrix: {exc}") from exc

    @property
    def r2(self) -> float:
        return float(self.R @ self.R)

    @property
    def active(self):
        return self.S

    @property
    def beta(self):
        return self.x

    def _pos(self, k: int) -> int:
        return int(np.flatnonzero(self.S == k)[0])

    def penalty(self, k: int) -> float:
        if np.any(self.S == k):
            val = 1.0 / self.Pinv[self._pos(k), self._pos(k)]
        else:
            g = self.gram[self.S, k]
            val = 1.0 - float(g @ (self.Pinv @ g))
        return float(min(max(val, 0.0), 1.0))

    def propose(self, k: int, add: bool) -> _Proposal:
        S = self.S
        if add:
            u = self.G[S, k]
            v = self.G[k, S]
            a = self.Ginv @ u
            w = v @ self.Ginv
            sch = self.G[k, k] - v @ a
            scale = abs(self.G[k, k]) + np.linalg.norm(v) * np.linalg.norm(a)
            if not np.isfinite(sch) or abs(sch) <= self.SINGULAR_TOL * scale:
                raise SolverError("candidate makes the reduced system singular")
            gam = (self.b[k] - v @ self.x) / sch
            x = np.append(self.x - a * gam, gam)
            R = self.R - (self.LRS @ a) * gam + self.LR[:, k] * gam
            return _Proposal(k, True, float(R @ R), np.append(S, k), x, (a, w, sch, R))
        i = self._pos(k)
        col = self.Ginv[:, i]
        d = col[i]
        step = col * (self.x[i] / d)
        R = self.R - self.LRS @ step
        x = np.delete(self.x - step, i)
        return _Proposal(k, False, float(R @ R), np.delete(S, i), x, (i, R))

    def accept(self, prop: _Proposal):
        k = prop.k
        if prop.add:
            a, w, sch, R = prop.payload
            n = self.S.size
            Gi = np.empty((n + 1, n + 1))
            Gi[:n, :n] = self.Ginv + np.outer(a, w) / sch
            Gi[:n, n] = -a / sch
            Gi[n, :n] = -w / sch
            Gi[n, n] = 1.0 / sch
            g = self.gram[self.S, k]
            pa = self.Pinv @ g
            ps = 1.0 - g @ pa
            Pi = np.empty((n + 1, n + 1))
            Pi[:n, :n] = self.Pinv + np.outer(pa, pa) / ps
            Pi[:n, n] = Pi[n, :n] = -pa / ps
            Pi[n, n] = 1.0 / ps
            self.LRS = np.column_stack([self.LRS, self.LR[:, k]])
        else:
            i, R = prop.payload
            Gi = self.Ginv - np.outer(self.Ginv[:, i], self.Ginv[i, :]) / self.Ginv[i, i]
            Gi = np.delete(np.delete(Gi, i, axis=0), i, axis=1)
            Pi = self.Pinv - np.outer(self.Pinv[:, i], self.Pinv[i, :]) / self.Pinv[i, i]
            Pi = np.delete(np.delete(Pi, i, axis=0), i, axis=1)
            self.LRS = np.delete(self.LRS, i, axis=1)
        self.Ginv, self.Pinv = Gi, Pi
        self.S, self.x, self.R = prop.active, prop.beta, R


def _tracker(problem: IntervalProblem, bits: np.ndarray):
    red = problem.red
    if red.dense and red.n_steps == 1 and red.gram is not None:
        return _BorderedTracker(problem, bits)
    return _FullTracker(problem, bits)


def gibbs_sample(problem: IntervalProblem, prior: PriorModel, cand_region: np.ndarray,
                 posterior: PosteriorSpec, config: SamplerConfig, seed: int,
                 interval: int = 0, J_fixed=None, init_bits=None,
                 reference=None, error_fn=None) -> SampleChain:
    """Systematic-scan Gibbs sampler over the candidate bits of the selected regions.

    Region bits are drawn once and held fixed. Every sweep visits the
    candidates of the selected regions in ascending order, solves the
    reduced system with and without the candidate, and resamples its bit
    from the exact conditional. One record is stored per sweep.
    """
    chain = SampleChain("gibbs", seed, interval)
    rng = rng_for(seed, f"gibbs:{interval}")
    J = _draw_regions(prior, rng, J_fixed)
    if init_bits is None:
        bits = _draw_candidates(prior, cand_region, J, rng)
    else:
        bits = np.asarray(init_bits, dtype=bool) & J[cand_region]
    bits = _prune_dependent(problem, bits)
    p = prior.flat_candidate_p()
    scan = np.flatnonzero(J[cand_region])
    sigma = posterior.sigma_L
    n_fixed = problem.red.n_fixed
    track = _tracker(problem, bits)
    for _ in range(config.n_sweeps):
        track.refresh()
        for c in scan:
            k = n_fixed + c
            pen = track.penalty(k)
            cur = _Proposal(k, bits[c], track.r2, track.active, track.beta)
            if not bits[c] and pen < DEPENDENCE_TOL:
                continue
            try:
                other = track.propose(k, not bits[c])
            except SolverError:
                # adding is singular: stays out; removing is singular: stays in
                log.info("candidate %d: reduced system singular without it or with it", c)
                continue
            if bits[c] and pen < DEPENDENCE_TOL:
                track.accept(other)
                bits[c] = False
                continue
            with_, without = (cur, other) if bits[c] else (other, cur)
            z = flip_log_odds(p[c], without.r2, with_.r2, pen, sigma)
            z += (_data_term(problem, with_.active, with_.beta, posterior)
                  - _data_term(problem, without.active, without.beta, posterior))
            prob = 1.0 / (1.0 + np.exp(-z)) if z > -700 else 0.0
            new = bool(rng.random() < prob)
            if new != bits[c]:
                track.accept(other)
                bits[c] = new
        ev = problem.evaluate(problem.active_from_bits(bits))
        chain.records.append(_record(problem, bits, J, ev, reference, error_fn))
    return chain


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------
@dataclass
class ChainStatistics:
    mean: np.ndarray
    std: np.ndarray
    frequencies: np.ndarray
    counts: np.ndarray


def burn_in_records(chain: SampleChain, burn_in: float) -> list:
    if not chain.records:
        raise ValueError("chain is empty")
    start = int(np.floor(burn_in * len(chain.records)))
    start = min(start, len(chain.records) - 1)
    return chain.records[start:]


def chain_statistics(chain: SampleChain, n_candidates: int | None = None,
                     burn_in: float = 0.0, transform=None) -> ChainStatistics:
    """Pixel-wise mean/std, candidate inclusion frequency and per-record counts.

    ``transform`` maps a fine state to the field being averaged (default identity).
    """
    recs = burn_in_records(chain, burn_in)
    fields = np.array([r.state if transform is None else transform(r.state) for r in recs])
    bits = np.array([r.selection.I for r in recs], dtype=float)
    if n_candidates is not None and bits.shape[1] != n_candidates:
        raise ValueError(f"chain has {bits.shape[1]} candidates, catalog {n_candidates}")
    return ChainStatistics(fields.mean(axis=0), fields.std(axis=0), bits.mean(axis=0),
                           np.array([r.selection.n_candidates for r in chain.records]))
