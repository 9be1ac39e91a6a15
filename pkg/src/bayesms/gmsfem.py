"""Offline multiscale spaces: partition of unity, randomized snapshots,
local spectral problems and the permanent/candidate split.

A :class:`BasisCatalog` collects, for one formulation and one coarse time
interval, every trial column (permanent and candidate) and every test column
in the formulation's dof coordinates, tagged with the coarse region they
belong to.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientField
from .fem import (Formulation, ParabolicCG, ParabolicMixed, WaveIPDG, assemble_q1,
                  assemble_rt0, boundary_edge_mask, cell_edges, edge_counts, q1_element)
from .mesh import MeshHierarchy, Region, oversample
from .util import derive_seed, orthonormalize

log = logging.getLogger(__name__)


class SpectralError(RuntimeError):
    """Degenerate local spectral problem."""


# ---------------------------------------------------------------------------
# Partition of unity
# ---------------------------------------------------------------------------
@dataclass
class PartitionOfUnity:
    """Multiscale hat functions, one row per coarse node, over all fine nodes.

    ``grad_sq[c]`` is the cell average of ``sum_i |grad chi_i|^2``.
    """

    hierarchy: MeshHierarchy
    chi: sp.csr_matrix
    grad_sq: np.ndarray

    def dense(self, node: int) -> np.ndarray:
        return self.chi[node].toarray().ravel()

    def kappa_tilde(self, field: CoefficientField) -> np.ndarray:
        return field.values * self.grad_sq


def _hat_on_box(nx: int, ny: int, corner: int) -> np.ndarray:
    xi = np.linspace(0.0, 1.0, nx + 1)
    eta = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xi, eta)
    fx = X if corner in (1, 3) else 1.0 - X
    fy = Y if corner in (2, 3) else 1.0 - Y
    return (fx * fy).ravel()


def _interior_solve(A: sp.csr_matrix, bmask: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``A u = 0`` inside with ``u = g`` on the boundary; ``g`` is (n_b, k)."""
    inner = np.flatnonzero(~bmask)
    bnd = np.flatnonzero(bmask)
    u = np.zeros((bmask.size, g.shape[1]))
    u[bnd] = g
    if inner.size:
        A_II = sp.csc_matrix(A[inner][:, inner])
        rhs = -(A[inner][:, bnd] @ g)
        try:
            u[inner] = spla.splu(A_II).solve(np.asarray(rhs))
        except RuntimeError as exc:
            raise SpectralError(f"singular local system: {exc}") from exc
    return u


def compute_pou(hierarchy: MeshHierarchy, field: CoefficientField) -> PartitionOfUnity:
    """kappa-harmonic extension of the coarse bilinear hats, block by block."""
    h = hierarchy
    rows, cols, vals = [], [], []
    for b in range(h.n_blocks):
        box = h.block_box(b)
        _, A = assemble_q1(field.block(box), h.hx, h.hy)
        bmask = box.boundary_mask()
        g = np.column_stack([_hat_on_box(box.nx, box.ny, k)[bmask] for k in range(4)])
        try:
            u = _interior_solve(A, bmask, g)
        except SpectralError as exc:
            raise SpectralError(f"block {b}: {exc}") from exc
        nodes = box.nodes(h.nx_fine)
        for k, vertex in enumerate(h.block_vertices(b)):
            nz = np.abs(u[:, k]) > 0
            rows.append(np.full(nz.sum(), vertex))
            cols.append(nodes[nz])
            vals.append(u[nz, k])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    # nodes shared by neighbouring blocks carry identical traces; keep one copy
    key = rows * h.n_nodes + cols
    _, first = np.unique(key, return_index=True)
    chi = sp.csr_matrix((vals[first], (rows[first], cols[first])),
                        shape=(h.n_coarse_nodes, h.n_nodes))
    Ke, _ = q1_element(h.hx, h.hy)
    X = [chi[:, h.cell_nodes[:, k]] for k in range(4)]
    energy = np.zeros(h.n_cells)
    for k in range(4):
        for l in range(4):
            if Ke[k, l] != 0.0:
                energy += Ke[k, l] * np.asarray(X[k].multiply(X[l]).sum(axis=0)).ravel()
    return PartitionOfUnity(h, chi, energy / (h.hx * h.hy))


# ---------------------------------------------------------------------------
# Snapshots and spectral problem (nodal / CG type)
# ---------------------------------------------------------------------------
@dataclass
class SnapshotSpace:
    region: Region
    nodes: np.ndarray          # global fine nodes of the oversampled region
    columns: np.ndarray        # (n_nodes, count)
    box: object

    @property
    def count(self) -> int:
        return self.columns.shape[1]


def generate_snapshots(hierarchy: MeshHierarchy, field: CoefficientField, region: Region,
                       count: int, rng_seed: int,
                       boundary_data: np.ndarray | None = None) -> SnapshotSpace:
    """kappa-harmonic functions in ``region`` with i.i.d. N(0,1) boundary values.

    ``boundary_data`` (n_boundary, count) replaces the random draw.
    """
    if count < 1:
        raise ValueError(f"snapshot count must be >= 1, got {count}")
    box = hierarchy.region_box(region)
    bmask = box.boundary_mask()
    n_b = int(bmask.sum())
    if (~bmask).sum() == 0:
        raise ValueError(f"region {region} has no interior fine nodes")
    if count > n_b:
        raise ValueError(f"snapshot count {count} exceeds the {n_b} boundary dofs of {region}")
    if boundary_data is None:
        g = np.random.default_rng(rng_seed).standard_normal((n_b, count))
    else:
        g = np.asarray(boundary_data, dtype=float).reshape(n_b, count)
    _, A = assemble_q1(field.block(box), hierarchy.hx, hierarchy.hy)
    psi = _interior_solve(A, bmask, g)
    return SnapshotSpace(tuple(region), box.nodes(hierarchy.nx_fine), psi, box)


@dataclass
class Eigenpairs:
    eigenvalues: np.ndarray    # ascending
    vectors: np.ndarray        # (n_nodes, k), S-orthonormal
    nodes: np.ndarray
    S: sp.csr_matrix           # local weighted mass on ``nodes``


def _reduced_eig(Ar: np.ndarray, Sr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T = orthonormalize(Sr, rtol=1e-12)
    if T.shape[1] == 0:
        raise SpectralError("weighted mass is singular on the snapshot span")
    lam, Y = np.linalg.eigh(T.T @ Ar @ T)
    return lam, T @ Y


def spectral_decompose(snapshots: SnapshotSpace, field: CoefficientField,
                       pou: PartitionOfUnity, target: Region | None = None) -> Eigenpairs:
    """Solve ``A(phi, v) = lambda S(phi, v)`` on the snapshot span.

    ``A`` is the kappa-weighted stiffness and ``S`` the mass weighted by
    ``kappa * sum_i |grad chi_i|^2``, both integrated over the snapshot
    region, or over ``target`` (a sub-region) when given. In the latter case
    the snapshots are restricted to the target before solving.
    """
    h = pou.hierarchy
    box = snapshots.box if target is None else h.region_box(target)
    nodes = box.nodes(h.nx_fine)
    Psi = snapshots.columns
    if target is not None:
        pos = np.searchsorted(snapshots.nodes, nodes)
        if np.any(pos >= snapshots.nodes.size) or np.any(snapshots.nodes[pos] != nodes):
            raise ValueError(f"target {target} is not inside the snapshot region")
        Psi = Psi[pos]
    kt = pou.kappa_tilde(field).reshape(h.ny_fine, h.nx_fine)[box.j0:box.j1, box.i0:box.i1]
    S, A = assemble_q1(field.block(box), h.hx, h.hy, mass_weight=kt)
    # random snapshots are badly conditioned; work in an orthonormal basis of their span
    Q, R, _ = sla.qr(Psi, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    Q = Q[:, :int(np.sum(d > 1e-12 * d[0]))] if d.size and d[0] > 0 else Q[:, :0]
    Ar = Q.T @ (A @ Q)
    Sr = Q.T @ (S @ Q)
    lam, C = _reduced_eig(0.5 * (Ar + Ar.T), 0.5 * (Sr + Sr.T))
    return Eigenpairs(lam, Q @ C, nodes, S)


@dataclass
class RegionBasisSet:
    region_id: int
    dofs: np.ndarray               # support (formulation-specific coordinates)
    eigenvalues: np.ndarray
    permanent: np.ndarray          # (n_dofs, n_perm)
    candidates: np.ndarray         # (n_dofs, n_cand)
    eigvecs: np.ndarray | None = None

    @property
    def n_perm(self) -> int:
        return self.permanent.shape[1]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]


def _local_mass(hierarchy: MeshHierarchy, box) -> sp.csr_matrix:
    M, _ = assemble_q1(np.ones((box.ny, box.nx)), hierarchy.hx, hierarchy.hy)
    return M


def build_region_basis(eigenpairs: Eigenpairs, pou: PartitionOfUnity, node: int,
                       n_perm: int, n_candidates: int) -> RegionBasisSet:
    """Offline functions ``chi_node * psi_j`` on the node's neighbourhood, L2-normalized."""
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if n_perm + n_candidates > eigenpairs.eigenvalues.size:
        raise ValueError(f"n_perm + n_candidates = {n_perm + n_candidates} exceeds "
                         f"{eigenpairs.eigenvalues.size} eigenpairs")
    h = pou.hierarchy
    region = h.node_blocks[node]
    box = h.region_box(region)
    nodes = box.nodes(h.nx_fine)
    pos = np.searchsorted(eigenpairs.nodes, nodes)
    chi = pou.dense(node)[nodes]
    k = n_perm + n_candidates
    phi = chi[:, None] * eigenpairs.vectors[pos, :k]
    M = _local_mass(h, box)
    norms = np.sqrt(np.einsum("ij,ij->j", phi, M @ phi))
    phi = phi / np.where(norms > 0, norms, 1.0)
    return RegionBasisSet(node, nodes, eigenpairs.eigenvalues[:k], phi[:, :n_perm],
                          phi[:, n_perm:k], eigenpairs.vectors[:, :k])


# ---------------------------------------------------------------------------
# Mixed: per coarse edge flux snapshots
# ---------------------------------------------------------------------------
def _mixed_block_solve(kappa_block: np.ndarray, hx: float, hy: float,
                       prescribed: dict[int, float], div_total: float) -> np.ndarray:
    """Velocity in one block with given boundary normal values and constant divergence.

    ``prescribed`` maps local boundary edge -> normal value; unspecified boundary
    edges carry zero. The pressure is made unique by a zero-mean multiplier.
    """
    ny, nx = kappa_block.shape
    Mv, B = assemble_rt0(kappa_block, hx, hy)
    bmask = boundary_edge_mask(nx, ny)
    inner = np.flatnonzero(~bmask)
    vb = np.zeros(bmask.size)
    for e, val in prescribed.items():
        vb[e] = val
    area = hx * hy
    n_c = nx * ny
    c = np.full(n_c, div_total / (nx * ny))
    Mi = Mv[inner][:, inner]
    Bi = B[:, inner]
    ones = np.full((n_c, 1), area)
    K = sp.bmat([[Mi, -Bi.T, None], [-Bi, None, sp.csr_matrix(ones)],
                 [None, sp.csr_matrix(ones.T), None]], format="csc")
    rhs = np.concatenate([-(Mv[inner] @ vb), -(c - B @ vb), [0.0]])
    sol = spla.splu(K).solve(rhs)
    v = vb.copy()
    v[inner] = sol[:inner.size]
    return v


def mixed_edge_snapshots(hierarchy: MeshHierarchy, field: CoefficientField,
                         edge: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-flux snapshots for every fine edge of an interior coarse edge.

    Returns (global fine edge indices of the support, columns).
    """
    h = hierarchy
    blocks = h.edge_blocks[edge]
    if len(blocks) != 2:
        raise ValueError(f"coarse edge {edge} lies on the no-flux boundary; it has no flux basis")
    fine_on_E = h.coarse_edge_fine_edges(edge)
    horizontal = h.coarse_edge_is_horizontal(edge)
    n_h, _ = edge_counts(h.nx_fine, h.ny_fine)
    per_block = []
    for b in blocks:
        box = h.block_box(b)
        nxl, nyl = box.nx, box.ny
        lnh, _ = edge_counts(nxl, nyl)
        # local <-> global edge maps for this block
        jj, ii = np.mgrid[0:nyl + 1, 0:nxl]
        g_h = ((jj + box.j0) * h.nx_fine + ii + box.i0).ravel()
        jj, ii = np.mgrid[0:nyl, 0:nxl + 1]
        g_v = (n_h + (jj + box.j0) * (h.nx_fine + 1) + ii + box.i0).ravel()
        gmap = np.concatenate([g_h, g_v])
        # is E on the far (top/right) side of this block?
        if horizontal:
            far = h.block_ij(b)[1] + 1 == h.coarse_node_ij(h.coarse_edge_nodes(edge)[0])[1]
            length = h.hx
        else:
            far = h.block_ij(b)[0] + 1 == h.coarse_node_ij(h.coarse_edge_nodes(edge)[0])[0]
            length = h.hy
        per_block.append((box, gmap, far, length))
    support = np.unique(np.concatenate([pb[1] for pb in per_block]))
    cols = np.zeros((support.size, fine_on_E.size))
    for j, ge in enumerate(fine_on_E):
        for box, gmap, far, length in per_block:
            local = int(np.flatnonzero(gmap == ge)[0])
            # outward flux of a unit +x/+y normal value: positive on the far side
            div_total = length if far else -length
            v = _mixed_block_solve(field.block(box), h.hx, h.hy, {local: 1.0}, div_total)
            pos = np.searchsorted(support, gmap)
            cols[pos, j] = np.where(np.abs(v) > 0, v, cols[pos, j])
    return support, cols


def build_mixed_edge_basis(hierarchy: MeshHierarchy, field: CoefficientField, edge: int,
                           n_perm: int, n_candidates: int) -> tuple[RegionBasisSet, np.ndarray]:
    """Flux basis on omega_E from the edge spectral problem.

    The first function carries unit normal flux on every fine edge of E. The
    others minimize ``int_{omega_E} kappa^-1 v.v`` relative to
    ``int_E kappa^-1 (v.n)^2`` (ascending) among zero-net-flux combinations. Returns the basis set in global fine-edge
    coordinates and the raw snapshot columns (for the test space).
    """
    h = hierarchy
    support, snaps = mixed_edge_snapshots(h, field, edge)
    k = snaps.shape[1]
    if n_perm < 1 or n_perm + n_candidates > k:
        raise ValueError(f"n_perm={n_perm}, n_candidates={n_candidates} incompatible with "
                         f"{k} fine edges on coarse edge {edge}")
    Mv, _ = assemble_rt0(field.as_grid(), h.hx, h.hy)
    Ml = Mv[support][:, support]
    Ar = snaps.T @ (Ml @ snaps)
    # edge term: kappa^-1 averaged over the two cells touching each fine edge
    fine_on_E = h.coarse_edge_fine_edges(edge)
    inv = 1.0 / field.values
    ce = cell_edges(h.nx_fine, h.ny_fine)
    length = h.hx if h.coarse_edge_is_horizontal(edge) else h.hy
    weights = np.empty(k)
    for j, ge in enumerate(fine_on_E):
        touching = np.flatnonzero((ce == ge).any(axis=1))
        weights[j] = length * inv[touching].mean()
    pos = np.searchsorted(support, fine_on_E)
    E = snaps[pos]                       # normal values of each snapshot on E
    Sr = E.T @ (weights[:, None] * E)
    Ar = 0.5 * (Ar + Ar.T)
    Sr = 0.5 * (Sr + Sr.T)
    # the unit net-flux combination comes first; the spectral modes carry no
    # net flux and are orthogonal to it
    ones = np.ones(k)
    Z = sla.null_space(ones[None, :])
    if Z.shape[1]:
        lam_c, C_c = _reduced_eig(Z.T @ Ar @ Z, Z.T @ Sr @ Z)
    else:
        lam_c, C_c = np.zeros(0), np.zeros((0, 0))
    lam0 = float(ones @ Ar @ ones) / float(ones @ Sr @ ones)
    lam = np.concatenate([[lam0], lam_c])
    C = np.column_stack([ones, Z @ C_c])
    vecs = snaps @ C
    Mv1, _ = assemble_rt0(np.ones((h.ny_fine, h.nx_fine)), h.hx, h.hy)
    M1 = Mv1[support][:, support]
    m = n_perm + n_candidates
    phi = vecs[:, :m]
    phi = phi / np.sqrt(np.einsum("ij,ij->j", phi, M1 @ phi))
    return (RegionBasisSet(edge, support, lam[:m], phi[:, :n_perm], phi[:, n_perm:], vecs[:, :m]),
            snaps)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------
@dataclass
class BasisCatalog:
    """All trial/test columns for one formulation and coarse interval.

    ``fixed`` holds permanent columns plus auxiliary always-on columns (the
    coarse pressure space of the mixed form, flagged by ``fixed_aux``).
    """

    formulation: str
    ndof: int
    region_ids: np.ndarray
    fixed: sp.csc_matrix
    fixed_region: np.ndarray
    fixed_aux: np.ndarray
    candidates: sp.csc_matrix
    cand_region: np.ndarray
    test: sp.csc_matrix
    test_region: np.ndarray
    eigenvalues: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return self.region_ids.size

    @property
    def n_fixed(self) -> int:
        return self.fixed.shape[1]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]

    @property
    def n_test(self) -> int:
        return self.test.shape[1]

    def trial(self) -> sp.csc_matrix:
        return sp.hstack([self.fixed, self.candidates], format="csc")

    def region_candidates(self, r: int) -> np.ndarray:
        return np.flatnonzero(self.cand_region == r)

    def test_slices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.test_region == r) for r in range(self.n_regions)]


def _embed(rows: np.ndarray, cols: np.ndarray, n: int) -> sp.csc_matrix:
    cols = np.asarray(cols)
    if cols.ndim == 1:
        cols = cols[:, None]
    r, c = np.nonzero(cols)
    return sp.csc_matrix((cols[r, c], (rows[r], c)), shape=(n, cols.shape[1]))


def _orthonormal_test(cols: sp.csc_matrix, mass: sp.csr_matrix) -> sp.csc_matrix:
    out = cols.toarray()
    # second pass cleans up rounding from nearly dependent snapshots
    for rtol in (1e-9, 1e-12):
        G = out.T @ (mass @ out)
        out = out @ orthonormalize(0.5 * (G + G.T), rtol=rtol)
    out[np.abs(out) < 1e-300] = 0.0
    return sp.csc_matrix(out)


def _assemble_catalog(name, ndof, region_sets, mass, aux=None):
    """``region_sets``: list of (region_id, perm cols, cand cols, test cols, eigenvalues)."""
    fixed, fixed_region, cands, cand_region, tests, test_region = [], [], [], [], [], []
    eig = {}
    for r, (rid, P, C, T, lam) in enumerate(region_sets):
        fixed.append(P)
        fixed_region.append(np.full(P.shape[1], r))
        cands.append(C)
        cand_region.append(np.full(C.shape[1], r))
        Tn = _orthonormal_test(T, mass)
        tests.append(Tn)
        test_region.append(np.full(Tn.shape[1], r))
        eig[int(rid)] = lam
    fixed_aux = np.zeros(sum(p.shape[1] for p in fixed), dtype=bool)
    if aux is not None:
        fixed.append(aux)
        fixed_region.append(np.full(aux.shape[1], -1))
        fixed_aux = np.concatenate([fixed_aux, np.ones(aux.shape[1], dtype=bool)])
    empty = sp.csc_matrix((ndof, 0))
    return BasisCatalog(
        formulation=name, ndof=ndof,
        region_ids=np.array([rs[0] for rs in region_sets], dtype=np.int64),
        fixed=sp.hstack(fixed, format="csc") if fixed else empty,
        fixed_region=np.concatenate(fixed_region) if fixed_region else np.zeros(0, int),
        fixed_aux=fixed_aux,
        candidates=sp.hstack(cands, format="csc") if cands else empty,
        cand_region=np.concatenate(cand_region) if cand_region else np.zeros(0, int),
        test=sp.hstack(tests, format="csc") if tests else empty,
        test_region=np.concatenate(test_region) if test_region else np.zeros(0, int),
        eigenvalues=eig,
    )


@dataclass
class BasisConfig:
    n_perm: int = 2
    n_candidates: int = 8
    p_bf: int = 4
    layers: int = 1
    seed: int = 0
    spectral_domain: str = "target"    # target | oversampled

    def __post_init__(self):
        if self.spectral_domain not in ("target", "oversampled"):
            raise ValueError(f"unknown spectral domain {self.spectral_domain!r}")

    @property
    def n_snapshots(self) -> int:
        return self.n_perm + self.n_candidates + self.p_bf


def _nodal_region_data(hierarchy, field, pou, config, interval_tag):
    """Per coarse node: (eigenpairs-based basis set, chi * snapshot columns on omega)."""
    h = hierarchy
    out = []
    for node in range(h.n_coarse_nodes):
        region = h.node_blocks[node]
        plus = oversample(h, region, config.layers)
        n_b = int(h.region_box(plus).boundary_mask().sum())
        count = config.n_snapshots
        if count > n_b:
            log.warning("node %d: clamping snapshot count %d to %d boundary dofs", node, count, n_b)
            count = n_b
        seed = derive_seed(config.seed, f"snapshot:{interval_tag}", node)
        snaps = generate_snapshots(h, field, plus, count, seed)
        target = region if config.spectral_domain == "target" else None
        eig = spectral_decompose(snaps, field, pou, target)
        n_cand = min(config.n_candidates, eig.eigenvalues.size - config.n_perm)
        rbs = build_region_basis(eig, pou, node, config.n_perm, max(n_cand, 0))
        pos = np.searchsorted(snaps.nodes, rbs.dofs)
        test_cols = pou.dense(node)[rbs.dofs][:, None] * snaps.columns[pos]
        out.append((rbs, test_cols))
    return out


def build_catalog(formulation: Formulation, t_star: float, config: BasisConfig,
                  interval_tag: int = 0) -> BasisCatalog:
    """Offline catalog for ``formulation`` with the coefficient frozen at ``t_star``."""
    h = formulation.hierarchy
    field_t = formulation.field_at(t_star)
    if isinstance(formulation, ParabolicCG):
        pou = compute_pou(h, field_t)
        free_pos = np.full(h.n_nodes, -1)
        free_pos[formulation.free] = np.arange(formulation.ndof)
        sets = []
        for rbs, test_cols in _nodal_region_data(h, field_t, pou, config, interval_tag):
            rows = free_pos[rbs.dofs]
            keep = rows >= 0
            P = _embed(rows[keep], rbs.permanent[keep], formulation.ndof)
            C = _embed(rows[keep], rbs.candidates[keep], formulation.ndof)
            T = _embed(rows[keep], test_cols[keep], formulation.ndof)
            P, C = _normalize_columns(P, formulation.mass), _normalize_columns(C, formulation.mass)
            sets.append((rbs.region_id, P, C, T, rbs.eigenvalues))
        return _assemble_catalog("cg", formulation.ndof, sets,
                                 formulation.test_inner(t_star))
    if isinstance(formulation, WaveIPDG):
        return _build_dg_catalog(formulation, field_t, config, interval_tag)
    if isinstance(formulation, ParabolicMixed):
        return _build_mixed_catalog(formulation, field_t, config)
    raise TypeError(f"unsupported formulation {type(formulation).__name__}")


def _normalize_columns(cols: sp.csc_matrix, mass) -> sp.csc_matrix:
    if cols.shape[1] == 0:
        return cols
    norms = np.sqrt(np.asarray((cols.multiply(mass @ cols)).sum(axis=0)).ravel())
    norms[norms == 0] = 1.0
    return sp.csc_matrix(cols @ sp.diags(1.0 / norms))


def _build_dg_catalog(form: WaveIPDG, field_t, config, interval_tag) -> BasisCatalog:
    """Nodal offline functions cut into coarse blocks; regions are coarse blocks."""
    h = form.hierarchy
    pou = compute_pou(h, field_t)
    data = _nodal_region_data(h, field_t, pou, config, interval_tag)
    by_node = {rbs.region_id: (rbs, tc) for rbs, tc in data}
    sets = []
    for b in range(h.n_blocks):
        cells = h.block_cells[b]
        cn = h.cell_nodes[cells]                       # (n_cells_K, 4) global nodes
        rows = (4 * cells[:, None] + np.arange(4)).ravel()
        P, C, T, lam = [], [], [], []
        for vertex in h.block_vertices(b):
            rbs, tc = by_node[vertex]
            pos = np.searchsorted(rbs.dofs, cn.ravel())
            P.append(rbs.permanent[pos])
            C.append(rbs.candidates[pos])
            T.append(tc[pos])
            lam.append(rbs.eigenvalues)
        P = _normalize_columns(_embed(rows, np.hstack(P), form.ndof), form.mass)
        C = _normalize_columns(_embed(rows, np.hstack(C), form.ndof), form.mass)
        T = _embed(rows, np.hstack(T), form.ndof)
        sets.append((b, P, C, T, np.concatenate(lam)))
    return _assemble_catalog("ipdg", form.ndof, sets, form.mass)


def coarse_pressure_basis(form: ParabolicMixed) -> sp.csc_matrix:
    """Indicator of each coarse block in the pressure block of x."""
    h = form.hierarchy
    rows = form.n_vel + np.arange(h.n_cells)
    return sp.csc_matrix((np.ones(h.n_cells), (rows, h.cell_block)),
                         shape=(form.ndof, h.n_blocks))


def _build_mixed_catalog(form: ParabolicMixed, field_t, config) -> BasisCatalog:
    h = form.hierarchy
    vel_pos = np.full(h.n_fine_edges, -1)
    vel_pos[form.edges] = np.arange(form.n_vel)
    sets = []
    for edge in h.interior_coarse_edges():
        k = h.coarse_edge_fine_edges(edge).size
        n_cand = max(0, min(config.n_candidates, k - config.n_perm))
        rbs, snaps = build_mixed_edge_basis(h, field_t, int(edge), config.n_perm, n_cand)
        rows = vel_pos[rbs.dofs]
        keep = rows >= 0
        P = _embed(rows[keep], rbs.permanent[keep], form.ndof)
        C = _embed(rows[keep], rbs.candidates[keep], form.ndof)
        T = _embed(rows[keep], snaps[keep], form.ndof)
        sets.append((int(edge), P, C, T, rbs.eigenvalues))
    return _assemble_catalog("mixed", form.ndof, sets, form.mass, aux=coarse_pressure_basis(form))


def full_space_catalog(form: Formulation) -> BasisCatalog:
    """Every fine dof is a permanent column: the reduced solver becomes the fine solver."""
    n = form.ndof
    I = sp.identity(n, format="csc")
    rows = form.residual_rows
    T = sp.csc_matrix((np.ones(rows.size), (rows, np.arange(rows.size))), shape=(n, rows.size))
    aux = np.zeros(n, dtype=bool)
    if isinstance(form, ParabolicMixed):
        aux[form.n_vel:] = True
    return BasisCatalog(form.name, n, np.array([0]), I, np.zeros(n, int), aux,
                        sp.csc_matrix((n, 0)), np.zeros(0, int), T,
                        np.zeros(rows.size, int))


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------
_MAGIC = b"BMSBASIS"
_VERSION = 1


def _w_i64(fh, *vals):
    fh.write(struct.pack(f"<{len(vals)}q", *vals))


def _w_arr(fh, arr, dtype):
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _r_i64(fh, n=1):
    vals = struct.unpack(f"<{n}q", fh.read(8 * n))
    return vals if n > 1 else vals[0]


def _r_arr(fh, n, dtype):
    dt = np.dtype(dtype)
    return np.frombuffer(fh.read(n * dt.itemsize), dtype=dt).copy()


def write_catalog(path: str | Path, catalog: BasisCatalog) -> None:
    """Header {magic, version, region count}, then one record per region.

    Region record: id, n_dofs, dof indices, n_cols, n_perm, n_eig,
    eigenvalues, columns (n_dofs x n_cols, column-major), n_test, test
    columns. Integers are little-endian int64, reals little-endian float64.
    Auxiliary fixed columns follow as a COO triplet block.
    """
    name = catalog.formulation.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _w_i64(fh, catalog.n_regions, catalog.ndof, len(name))
        fh.write(name)
        fixed = catalog.fixed.tocsc()
        for r, rid in enumerate(catalog.region_ids):
            P = fixed[:, np.flatnonzero((catalog.fixed_region == r) & ~catalog.fixed_aux)]
            C = catalog.candidates[:, catalog.region_candidates(r)]
            T = catalog.test[:, np.flatnonzero(catalog.test_region == r)]
            cols = sp.hstack([P, C], format="csc")
            dofs = np.unique(np.concatenate([cols.indices, T.indices])).astype(np.int64)
            lam = np.asarray(catalog.eigenvalues.get(int(rid), np.zeros(0)))
            _w_i64(fh, int(rid), dofs.size)
            _w_arr(fh, dofs, "<i8")
            _w_i64(fh, cols.shape[1], P.shape[1], lam.size)
            _w_arr(fh, lam, "<f8")
            _w_arr(fh, cols[dofs].toarray().ravel(order="F"), "<f8")
            _w_i64(fh, T.shape[1])
            _w_arr(fh, T[dofs].toarray().ravel(order="F"), "<f8")
        aux = sp.coo_matrix(fixed[:, np.flatnonzero(catalog.fixed_aux)])
        _w_i64(fh, aux.shape[1], aux.nnz)
        _w_arr(fh, aux.row, "<i8")
        _w_arr(fh, aux.col, "<i8")
        _w_arr(fh, aux.data, "<f8")


def read_catalog(path: str | Path) -> BasisCatalog:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a basis cache file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        n_regions, ndof, name_len = _r_i64(fh, 3)
        name = fh.read(name_len).decode()
        sets = []
        for _ in range(n_regions):
            rid, n_dofs = _r_i64(fh, 2)
            dofs = _r_arr(fh, n_dofs, "<i8")
            n_cols, n_perm, n_eig = _r_i64(fh, 3)
            lam = _r_arr(fh, n_eig, "<f8")
            cols = _r_arr(fh, n_dofs * n_cols, "<f8").reshape(n_dofs, n_cols, order="F")
            n_test = _r_i64(fh)
            T = _r_arr(fh, n_dofs * n_test, "<f8").reshape(n_dofs, n_test, order="F")
            sets.append((rid, _embed(dofs, cols[:, :n_perm], ndof),
                         _embed(dofs, cols[:, n_perm:], ndof), _embed(dofs, T, ndof), lam))
        n_aux, nnz = _r_i64(fh, 2)
        rows = _r_arr(fh, nnz, "<i8")
        cols = _r_arr(fh, nnz, "<i8")
        vals = _r_arr(fh, nnz, "<f8")
    aux = sp.csc_matrix((vals, (rows, cols)), shape=(ndof, n_aux)) if n_aux else None
    cat = _assemble_catalog(name, ndof, sets, sp.identity(ndof), aux)
    # test columns were stored already orthonormalized; keep them verbatim
    cat.test = sp.hstack([s[3] for s in sets], format="csc") if sets else cat.test
    cat.test_region = np.concatenate([np.full(s[3].shape[1], r) for r, s in enumerate(sets)]) \
        if sets else cat.test_region
    return cat
