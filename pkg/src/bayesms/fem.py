"""Fine-grid discretizations and reference time steppers.

Three formulations share one abstraction: every time step solves

    lhs @ x_new = sum_k history[k] @ x_{n-k} + load

with sparse operators returned by ``formulation.operator(t_new)``. The
reduced (multiscale) solver projects exactly these operators, so the fine
oracle and the reduced march agree whenever the trial space is the full
fine space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientField, evaluate_at
from .mesh import ConfigurationError, MeshHierarchy

log = logging.getLogger(__name__)

_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class SolverError(RuntimeError):
    """A linear system could not be solved."""


# ---------------------------------------------------------------------------
# Q1 (bilinear) elements
# ---------------------------------------------------------------------------
def q1_element(hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Element stiffness and mass, local node order (0,0), (1,0), (0,1), (1,1)."""
    s_x = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hx
    s_y = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hy
    m_x = hx / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    m_y = hy / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    K = np.kron(m_y, s_x) + np.kron(s_y, m_x)
    M = np.kron(m_y, m_x)
    return K, M


def _grid_cell_nodes(nx: int, ny: int) -> np.ndarray:
    jj, ii = np.mgrid[0:ny, 0:nx]
    n0 = (jj * (nx + 1) + ii).ravel()
    n2 = n0 + nx + 1
    return np.column_stack([n0, n0 + 1, n2, n2 + 1])


def assemble_q1(kappa: np.ndarray, hx: float, hy: float,
                mass_weight: np.ndarray | None = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Mass and stiffness on a rectangular grid of ``kappa.shape == (ny, nx)`` cells.

    No boundary conditions are applied. ``mass_weight`` optionally weights the
    mass matrix per cell.
    """
    ny, nx = kappa.shape
    Ke, Me = q1_element(hx, hy)
    conn = _grid_cell_nodes(nx, ny)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    n = (nx + 1) * (ny + 1)
    kv = kappa.ravel()
    A = sp.coo_matrix((np.outer(kv, Ke.ravel()).ravel(), (rows, cols)), shape=(n, n)).tocsr()
    w = np.ones(nx * ny) if mass_weight is None else np.asarray(mass_weight).ravel()
    M = sp.coo_matrix((np.outer(w, Me.ravel()).ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return M, A


def assemble_cg(hierarchy: MeshHierarchy, field: CoefficientField,
                dirichlet: bool = True) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Q1 mass and stiffness on the fine grid.

    With ``dirichlet`` the boundary rows/columns are removed and the result is
    indexed by ``hierarchy.interior_nodes``.
    """
    M, A = assemble_q1(field.as_grid(), hierarchy.hx, hierarchy.hy)
    if dirichlet:
        free = hierarchy.interior_nodes
        M = M[free][:, free].tocsr()
        A = A[free][:, free].tocsr()
    return M, A


# ---------------------------------------------------------------------------
# Lowest-order Raviart-Thomas on rectangles
# ---------------------------------------------------------------------------
def edge_counts(nx: int, ny: int) -> tuple[int, int]:
    return nx * (ny + 1), (nx + 1) * ny


def cell_edges(nx: int, ny: int) -> np.ndarray:
    """(n_cells, 4) edge indices: bottom, top, left, right."""
    n_h, _ = edge_counts(nx, ny)
    jj, ii = np.mgrid[0:ny, 0:nx]
    jj, ii = jj.ravel(), ii.ravel()
    bottom = jj * nx + ii
    top = bottom + nx
    left = n_h + jj * (nx + 1) + ii
    right = left + 1
    return np.column_stack([bottom, top, left, right])


def boundary_edge_mask(nx: int, ny: int) -> np.ndarray:
    n_h, n_v = edge_counts(nx, ny)
    mask = np.zeros(n_h + n_v, dtype=bool)
    mask[:nx] = True
    mask[n_h - nx:n_h] = True
    v = np.arange(n_v)
    mask[n_h + v[(v % (nx + 1) == 0) | (v % (nx + 1) == nx)]] = True
    return mask


def assemble_rt0(kappa: np.ndarray, hx: float, hy: float) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Velocity mass weighted by 1/kappa and divergence coupling, all edges kept.

    Velocity dofs are normal components in the +x / +y direction; ``B[c, e]``
    is the integral of div(w_e) over cell ``c``.
    """
    ny, nx = kappa.shape
    inv = 1.0 / kappa.ravel()
    ce = cell_edges(nx, ny)
    area = hx * hy
    m = area * np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])
    rows, cols, vals = [], [], []
    for pair in ((0, 1), (2, 3)):
        idx = ce[:, pair]
        rows.append(np.repeat(idx, 2, axis=1).ravel())
        cols.append(np.tile(idx, (1, 2)).ravel())
        vals.append(np.outer(inv, m.ravel()).ravel())
    n_e = sum(edge_counts(nx, ny))
    Mv = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n_e, n_e)).tocsr()
    n_c = nx * ny
    signs = np.array([-hx, hx, -hy, hy])
    B = sp.coo_matrix((np.tile(signs, n_c), (np.repeat(np.arange(n_c), 4), ce.ravel())),
                      shape=(n_c, n_e)).tocsr()
    return Mv, B


def free_edges(hierarchy: MeshHierarchy) -> np.ndarray:
    return np.flatnonzero(~boundary_edge_mask(hierarchy.nx_fine, hierarchy.ny_fine))


def assemble_mixed(hierarchy: MeshHierarchy,
                   field: CoefficientField) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Velocity mass and divergence matrix with no-flux boundary edges removed."""
    Mv, B = assemble_rt0(field.as_grid(), hierarchy.hx, hierarchy.hy)
    free = free_edges(hierarchy)
    return Mv[free][:, free].tocsr(), B[:, free].tocsr()


# ---------------------------------------------------------------------------
# Symmetric interior penalty DG with broken Q1
# ---------------------------------------------------------------------------
def _q1_traces(side: str, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values and reference gradients of the 4 Q1 shape functions at a face point.

    ``s`` in [0, 1] runs along the face. Returns (values, d/dxi, d/deta).
    """
    xi, eta = {"left": (0.0, s), "right": (1.0, s), "bottom": (s, 0.0), "top": (s, 1.0)}[side]
    val = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])
    dxi = np.array([-(1 - eta), 1 - eta, -eta, eta])
    deta = np.array([-(1 - xi), -xi, 1 - xi, xi])
    return val, dxi, deta


def _ipdg_face_matrices(hx: float, hy: float, gamma: float):
    """Unit-coefficient face matrices: interior vertical/horizontal (8x8) and
    boundary per side (4x4)."""
    interior = {}
    for orient, (sl, sr, length, h, comp) in {
        "vertical": ("right", "left", hy, hx, 0),
        "horizontal": ("top", "bottom", hx, hy, 1),
    }.items():
        F = np.zeros((8, 8))
        for s in _GAUSS2:
            vl, dxl, del_ = _q1_traces(sl, s)
            vr, dxr, der = _q1_traces(sr, s)
            gl = dxl / hx if comp == 0 else del_ / hy
            gr = dxr / hx if comp == 0 else der / hy
            jump = np.concatenate([vl, -vr])
            avg = 0.5 * np.concatenate([gl, gr])
            w = 0.5 * length
            F += w * (-np.outer(jump, avg) - np.outer(avg, jump)
                      + gamma / h * np.outer(jump, jump))
        interior[orient] = F
    boundary = {}
    for side, (length, h, comp, sign) in {
        "left": (hy, hx, 0, -1.0), "right": (hy, hx, 0, 1.0),
        "bottom": (hx, hy, 1, -1.0), "top": (hx, hy, 1, 1.0),
    }.items():
        F = np.zeros((4, 4))
        for s in _GAUSS2:
            v, dxi, deta = _q1_traces(side, s)
            dn = sign * (dxi / hx if comp == 0 else deta / hy)
            w = 0.5 * length
            F += w * (-np.outer(v, dn) - np.outer(dn, v) + gamma / h * np.outer(v, v))
        boundary[side] = F
    return interior, boundary


def dg_dofs(hierarchy: MeshHierarchy) -> np.ndarray:
    """(n_cells, 4) broken dof indices, ``4 * cell + local``."""
    return np.arange(4 * hierarchy.n_cells).reshape(-1, 4)


def assemble_dg_mass(hierarchy: MeshHierarchy, weight: np.ndarray | None = None) -> sp.csr_matrix:
    _, Me = q1_element(hierarchy.hx, hierarchy.hy)
    w = np.ones(hierarchy.n_cells) if weight is None else np.asarray(weight)
    blocks = [wc * Me for wc in w]
    return sp.block_diag(blocks, format="csr")


def assemble_ipdg(hierarchy: MeshHierarchy, field: CoefficientField,
                  gamma: float) -> sp.csr_matrix:
    """SIPG operator on broken Q1; the face coefficient is the harmonic mean of
    the two neighbours, which multiplies both the averaged normal flux and the
    penalty."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    nx, ny = hierarchy.nx_fine, hierarchy.ny_fine
    hx, hy = hierarchy.hx, hierarchy.hy
    a = field.values
    Ke, _ = q1_element(hx, hy)
    dofs = dg_dofs(hierarchy)
    rows, cols, vals = [], [], []

    def add(idx, mats):
        rows.append(np.repeat(idx, idx.shape[1], axis=1).ravel())
        cols.append(np.tile(idx, (1, idx.shape[1])).ravel())
        vals.append(mats.ravel())

    add(dofs, np.outer(a, Ke.ravel()))
    interior, boundary = _ipdg_face_matrices(hx, hy, gamma)
    grid = np.arange(nx * ny).reshape(ny, nx)
    # vertical interior faces: left cell grid[:, :-1], right cell grid[:, 1:]
    L, R = grid[:, :-1].ravel(), grid[:, 1:].ravel()
    af = 2 * a[L] * a[R] / (a[L] + a[R])
    add(np.hstack([dofs[L], dofs[R]]), np.outer(af, interior["vertical"].ravel()))
    Bc, Tc = grid[:-1, :].ravel(), grid[1:, :].ravel()
    af = 2 * a[Bc] * a[Tc] / (a[Bc] + a[Tc])
    add(np.hstack([dofs[Bc], dofs[Tc]]), np.outer(af, interior["horizontal"].ravel()))
    for side, cells in (("left", grid[:, 0]), ("right", grid[:, -1]),
                        ("bottom", grid[0, :]), ("top", grid[-1, :])):
        add(dofs[cells], np.outer(a[cells], boundary[side].ravel()))
    n = 4 * nx * ny
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()


def nodal_to_dg(hierarchy: MeshHierarchy, u_nodes: np.ndarray) -> np.ndarray:
    """Inject a continuous nodal Q1 function into the broken space."""
    return np.asarray(u_nodes)[..., hierarchy.cell_nodes].reshape(*np.shape(u_nodes)[:-1], -1)


# ---------------------------------------------------------------------------
# Reference steppers with plain matrices
# ---------------------------------------------------------------------------
@dataclass
class FineState:
    values: np.ndarray
    t: float
    formulation: str


def _factor(K):
    try:
        return spla.splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise SolverError(f"singular system: {exc}") from exc


def fine_solve_parabolic(M, A, u0, f, dt: float, n_steps: int,
                         t0: float = 0.0) -> list[FineState]:
    """Backward Euler ``(M + dt A) u_new = M u + dt M f``.

    ``f`` is a scalar, a vector or a callable of time. Returns ``n_steps + 1``
    states including the initial one.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    lu = _factor(M + dt * A)
    u = np.asarray(u0, dtype=float)
    out = [FineState(u.copy(), t0, "cg")]
    for n in range(1, n_steps + 1):
        t = t0 + n * dt
        fv = _source_values(f, t, u.size)
        u = lu.solve(M @ u + dt * (M @ fv))
        out.append(FineState(u, t, "cg"))
    return out


def estimate_max_eig(A, M, iters: int = 500, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest eigenvalue of ``M^-1 A`` by power iteration (A, M symmetric, M SPD)."""
    lu = _factor(M)
    x = np.random.default_rng(seed).standard_normal(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = lu.solve(A @ x)
        lam_new = float(x @ (M @ y)) / float(x @ (M @ x))
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return lam


def check_wave_dt(A, M, dt: float, lam_max: float | None = None) -> float:
    """Raise if ``dt**2 >= 4 / lambda_max(M^-1 A)``; returns the admissible bound."""
    lam = estimate_max_eig(A, M) if lam_max is None else lam_max
    bound = 2.0 / np.sqrt(lam) if lam > 0 else np.inf
    if dt >= bound:
        raise ConfigurationError(
            f"dt={dt:.6g} violates the explicit stability bound; need dt < {bound:.6g}")
    return bound


def fine_solve_wave(A_dg, M, u0, u1, f, dt: float, n_steps: int, t0: float = 0.0,
                    check: bool = True) -> list[FineState]:
    """Central differences ``M (u+ - 2u + u-) / dt^2 + A u = M f^n``.

    ``u0`` and ``u1`` are the states at ``t0`` and ``t0 + dt``; the result
    holds ``n_steps + 2`` states.
    """
    if check:
        check_wave_dt(A_dg, M, dt)
    lu = _factor(M)
    prev, cur = np.asarray(u0, float), np.asarray(u1, float)
    out = [FineState(prev.copy(), t0, "ipdg"), FineState(cur.copy(), t0 + dt, "ipdg")]
    for n in range(1, n_steps + 1):
        t = t0 + n * dt
        fv = _source_values(f, t, cur.size)
        acc = lu.solve(M @ fv - A_dg @ cur)
        nxt = 2 * cur - prev + dt * dt * acc
        prev, cur = cur, nxt
        out.append(FineState(cur.copy(), t + dt, "ipdg"))
    return out


# ---------------------------------------------------------------------------
# Formulations as one-step operators
# ---------------------------------------------------------------------------
@dataclass
class StepOperator:
    lhs: sp.csr_matrix
    history: tuple
    load: np.ndarray

    def rhs(self, past: Sequence[np.ndarray]) -> np.ndarray:
        out = self.load.copy()
        for H, x in zip(self.history, past):
            out += H @ x
        return out


Source = Callable[[float], np.ndarray] | np.ndarray | float


def _source_values(source, t: float, n: int) -> np.ndarray:
    if callable(source):
        return np.asarray(source(t), dtype=float)
    return np.broadcast_to(np.asarray(source, dtype=float), (n,)).copy()


class Formulation:
    """Common interface of the three discretizations.

    ``residual_sign`` is the factor turning ``lhs @ x - rhs`` into the
    residual as written for the formulation, and ``residual_rows`` restricts
    the residual to the rows tested by snapshot functions.
    """

    name: str
    n_history: int
    residual_sign: float

    def __init__(self, hierarchy: MeshHierarchy, field: CoefficientField, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.hierarchy = hierarchy
        self.field = field
        self.dt = float(dt)
        self._cache: dict = {}

    def field_at(self, t: float) -> CoefficientField:
        return evaluate_at(self.field, t)

    def _key(self, t: float):
        return None if self.field.time_law is None else round(t, 14)

    def operator(self, t: float) -> StepOperator:
        raise NotImplementedError

    def fine_march(self, history: Sequence[np.ndarray], t0: float,
                   n_steps: int) -> list[np.ndarray]:
        """States after each of ``n_steps`` fine steps; ``history`` is most recent first."""
        past = list(history)
        out = []
        lus = {}
        for s in range(1, n_steps + 1):
            op = self.operator(t0 + s * self.dt)
            key = id(op.lhs)
            if key not in lus:
                lus[key] = _factor(op.lhs)
            x = lus[key].solve(op.rhs(past))
            out.append(x)
            past = [x] + past[:-1]
        return out

    def to_cells(self, x: np.ndarray) -> np.ndarray:
        """Cell-averaged scalar display field, shape (..., n_cells)."""
        raise NotImplementedError

    def test_inner(self, t: float) -> sp.csr_matrix:
        """SPD matrix in which test functions are orthonormalized."""
        return self.mass


class ParabolicCG(Formulation):
    """Backward Euler with Q1 elements; dofs are the interior fine nodes."""

    name = "cg"
    n_history = 1
    residual_sign = -1.0

    def __init__(self, hierarchy, field, dt, source: Source = 1.0):
        super().__init__(hierarchy, field, dt)
        self.free = hierarchy.interior_nodes
        self.ndof = self.free.size
        self.source = source
        M, _ = assemble_cg(hierarchy, field)
        self.mass = M

    def stiffness(self, t: float) -> sp.csr_matrix:
        key = ("A", self._key(t))
        if key not in self._cache:
            self._cache[key] = assemble_cg(self.hierarchy, self.field_at(t))[1]
        return self._cache[key]

    def operator(self, t: float) -> StepOperator:
        key = ("op", self._key(t), None if not callable(self.source) else round(t, 14))
        if key not in self._cache:
            Mdt = self.mass / self.dt
            load = self.mass @ _source_values(self.source, t, self.ndof)
            self._cache[key] = StepOperator((Mdt + self.stiffness(t)).tocsr(), (Mdt,), load)
        return self._cache[key]

    @property
    def residual_rows(self) -> np.ndarray:
        return np.arange(self.ndof)

    def test_inner(self, t: float) -> sp.csr_matrix:
        # the step's own energy product: the tested residual is then a dual norm
        return self.operator(t).lhs

    def to_nodes(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (self.hierarchy.n_nodes,))
        out[..., self.free] = x
        return out

    def to_cells(self, x):
        return self.to_nodes(x)[..., self.hierarchy.cell_nodes].mean(axis=-1)


class ParabolicMixed(Formulation):
    """Backward Euler for the mixed form; x = [velocity on interior fine edges, cell pressures]."""

    name = "mixed"
    n_history = 1
    residual_sign = 1.0

    def __init__(self, hierarchy, field, dt, source: Source = 1.0):
        super().__init__(hierarchy, field, dt)
        self.edges = free_edges(hierarchy)
        self.n_vel = self.edges.size
        self.n_pres = hierarchy.n_cells
        self.ndof = self.n_vel + self.n_pres
        self.source = source
        self.cell_area = hierarchy.hx * hierarchy.hy
        self.Mp = sp.identity(self.n_pres, format="csr") * self.cell_area
        Mv1, _ = assemble_mixed(hierarchy, CoefficientField(np.ones(hierarchy.n_cells),
                                                            hierarchy.nx_fine, hierarchy.ny_fine))
        self.velocity_mass = Mv1
        self.mass = sp.block_diag([Mv1, self.Mp], format="csr")

    def blocks(self, t: float):
        key = ("blocks", self._key(t))
        if key not in self._cache:
            self._cache[key] = assemble_mixed(self.hierarchy, self.field_at(t))
        return self._cache[key]

    def operator(self, t: float) -> StepOperator:
        key = ("op", self._key(t), None if not callable(self.source) else round(t, 14))
        if key not in self._cache:
            Mv, B = self.blocks(t)
            Mp_dt = self.Mp / self.dt
            lhs = sp.bmat([[Mv, -B.T], [-B, -Mp_dt]], format="csr")
            H = sp.bmat([[sp.csr_matrix((self.n_vel, self.n_vel)), None],
                         [None, -Mp_dt]], format="csr")
            f = _source_values(self.source, t, self.n_pres)
            load = np.concatenate([np.zeros(self.n_vel), -(self.Mp @ f)])
            self._cache[key] = StepOperator(lhs, (H,), load)
        return self._cache[key]

    @property
    def residual_rows(self) -> np.ndarray:
        return np.arange(self.n_vel)

    def velocity(self, x):
        return np.asarray(x)[..., :self.n_vel]

    def pressure(self, x):
        return np.asarray(x)[..., self.n_vel:]

    def to_cells(self, x):
        """x-component of the velocity at cell centres."""
        h = self.hierarchy
        full = np.zeros(np.shape(x)[:-1] + (h.n_fine_edges,))
        full[..., self.edges] = self.velocity(x)
        ce = cell_edges(h.nx_fine, h.ny_fine)
        return 0.5 * (full[..., ce[:, 2]] + full[..., ce[:, 3]])


class WaveIPDG(Formulation):
    """Explicit central differences with the SIPG operator on broken Q1."""

    name = "ipdg"
    n_history = 2
    residual_sign = 1.0

    def __init__(self, hierarchy, field, dt, source: Source = 0.0, gamma: float = 10.0,
                 check_stability: bool = True):
        super().__init__(hierarchy, field, dt)
        self.gamma = float(gamma)
        self.ndof = 4 * hierarchy.n_cells
        self.source = source
        self.mass = assemble_dg_mass(hierarchy)
        if check_stability:
            self.dt_bound = check_wave_dt(self.stiffness(0.0), self.mass, self.dt)

    def stiffness(self, t: float) -> sp.csr_matrix:
        key = ("A", self._key(t))
        if key not in self._cache:
            self._cache[key] = assemble_ipdg(self.hierarchy, self.field_at(t), self.gamma)
        return self._cache[key]

    def operator(self, t: float) -> StepOperator:
        # unknown at t; the explicit update evaluates everything at t - dt
        tn = t - self.dt
        key = ("op", self._key(tn), None if not callable(self.source) else round(tn, 14))
        if key not in self._cache:
            dt2 = self.dt ** 2
            M = self.mass
            A = self.stiffness(tn)
            load = M @ _source_values(self.source, tn, self.ndof)
            self._cache[key] = StepOperator((M / dt2).tocsr(),
                                            ((2.0 / dt2) * M - A, -(M / dt2)), load)
        return self._cache[key]

    @property
    def residual_rows(self) -> np.ndarray:
        return np.arange(self.ndof)

    def to_cells(self, x):
        x = np.asarray(x)
        return x.reshape(x.shape[:-1] + (-1, 4)).mean(axis=-1)
