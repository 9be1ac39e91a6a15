"""Snapshot-tested residuals and their per-region norms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass
class TestSpace:
    """Test columns (fine coordinates) with the region owning each column."""

    __test__ = False

    columns: sp.csc_matrix
    region: np.ndarray
    n_regions: int

    @classmethod
    def from_catalog(cls, catalog) -> "TestSpace":
        return cls(catalog.test, catalog.test_region, catalog.n_regions)

    @property
    def size(self) -> int:
        return self.columns.shape[1]

    def slices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.region == r) for r in range(self.n_regions)]


@dataclass
class ResidualVector:
    values: np.ndarray
    region: np.ndarray
    n_regions: int
    interval: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != self.region.size:
            raise ValueError(f"residual has {self.values.shape[-1]} coordinates, "
                             f"region map has {self.region.size}")

    def slice(self, r: int) -> np.ndarray:
        return self.values[..., self.region == r]


@dataclass
class RegionNorms:
    local: np.ndarray
    global_norm: float
    sup: np.ndarray | None = None


def _check(n: int, **vectors):
    for name, v in vectors.items():
        if np.ndim(v) and np.shape(v)[-1] != n:
            raise ValueError(f"{name} has length {np.shape(v)[-1]}, expected {n}")


def _test_action(testspace: TestSpace, vec: np.ndarray, interval: int) -> ResidualVector:
    cols = testspace.columns
    if cols.shape[0] != vec.shape[-1]:
        raise ValueError(f"test columns have {cols.shape[0]} rows, state has {vec.shape[-1]}")
    return ResidualVector(cols.T @ vec, testspace.region, testspace.n_regions, interval)


def _load(M, f, n):
    return M @ np.broadcast_to(np.asarray(f, dtype=float), (n,))


def residual_parabolic_cg(u_plus, u_fixed_next, u_fixed_prev, f, dt: float,
                          testspace: TestSpace, M, A, interval: int = 0) -> ResidualVector:
    """``(f, v) - ((u - u_prev)/dt, v) - (kappa grad u, grad v)`` with ``u = u_plus + u_fixed_next``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = M.shape[0]
    _check(n, u_plus=u_plus, u_fixed_next=u_fixed_next, u_fixed_prev=u_fixed_prev, f=f)
    u = np.asarray(u_plus, dtype=float) + np.asarray(u_fixed_next, dtype=float)
    r = _load(M, f, n) - M @ (u - np.asarray(u_fixed_prev, dtype=float)) / dt - A @ u
    return _test_action(testspace, r, interval)


def residual_mixed(v_plus, v_fixed, u_fixed, testspace: TestSpace, Mv, B,
                   interval: int = 0) -> ResidualVector:
    """``(kappa^-1 (v_plus + v_fixed), w) - (div w, u_fixed)`` for every test flux ``w``.

    ``Mv`` is the kappa^-1 weighted flux mass and ``B`` the cell divergence
    (``(B v)_c = int_c div v``). Test columns may cover velocities only or
    the full velocity-pressure vector (pressure rows are ignored).
    """
    n_vel, n_cells = Mv.shape[0], B.shape[0]
    _check(n_vel, v_plus=v_plus, v_fixed=v_fixed)
    _check(n_cells, u_fixed=u_fixed)
    v = np.asarray(v_plus, dtype=float) + np.asarray(v_fixed, dtype=float)
    r = Mv @ v - B.T @ np.asarray(u_fixed, dtype=float)
    cols = testspace.columns
    if cols.shape[0] == n_vel + n_cells:
        cols = cols[:n_vel]
    return _test_action(TestSpace(sp.csc_matrix(cols), testspace.region, testspace.n_regions),
                        r, interval)


def residual_wave(u_next, u_curr, u_prev, f, dt: float, testspace: TestSpace, M, A,
                  interval: int = 0) -> ResidualVector:
    """``((u_next - 2 u_curr + u_prev)/dt^2, v) + a_DG(u_curr, v) - (f, v)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = M.shape[0]
    _check(n, u_next=u_next, u_curr=u_curr, u_prev=u_prev, f=f)
    u_curr = np.asarray(u_curr, dtype=float)
    r = (M @ (np.asarray(u_next, dtype=float) - 2.0 * u_curr + np.asarray(u_prev, dtype=float))
         / dt ** 2 + A @ u_curr - _load(M, f, n))
    return _test_action(testspace, r, interval)


def residual_step(form, x_new, past, t: float, testspace: TestSpace,
                  interval: int = 0) -> ResidualVector:
    """Residual of one step of ``form`` ending at ``t``, in the formulation's sign convention."""
    op = form.operator(t)
    r = form.residual_sign * (op.lhs @ x_new - op.rhs(past))
    full = np.zeros(form.ndof)
    rows = form.residual_rows
    full[rows] = r[rows]
    return _test_action(testspace, full, interval)


def region_norms(residual: ResidualVector, testspace: TestSpace | None = None,
                 mass=None) -> RegionNorms:
    """Discrete l2 norm per region slice and globally.

    With ``testspace`` and ``mass`` the sup variant ``max |R_v| / ||v||`` per
    region is filled in as well. Leading axes of ``values`` (e.g. steps)
    are pooled.
    """
    vals = residual.values.reshape(-1, residual.region.size)
    sq = np.zeros(residual.n_regions)
    np.add.at(sq, residual.region, (vals ** 2).sum(axis=0))
    local = np.sqrt(sq)
    glob = float(np.sqrt(sq.sum()))
    sup = None
    if testspace is not None and mass is not None:
        cols = testspace.columns
        norms = np.sqrt(np.asarray(cols.multiply(mass @ cols).sum(axis=0)).ravel())
        ratio = np.abs(vals).max(axis=0) / np.where(norms > 0, norms, np.inf)
        sup = np.zeros(residual.n_regions)
        np.maximum.at(sup, residual.region, ratio)
    return RegionNorms(local, glob, sup)
