"""Nested Cartesian coarse/fine grids and coarse-region topology.

Indexing is row-major from the lower-left corner everywhere:

* fine node ``(i, j)`` -> ``j * (nx + 1) + i``
* fine cell ``(i, j)`` -> ``j * nx + i``
* coarse block ``(I, J)`` -> ``J * NX + I``
* coarse node ``(I, J)`` -> ``J * (NX + 1) + I``
* edges (coarse and fine alike): horizontal edges first, ``j * nx + i`` for
  the edge from node ``(i, j)`` to ``(i + 1, j)``, then vertical edges,
  offset ``nx * (ny + 1)``, ``j * (nx + 1) + i`` for the edge from node
  ``(i, j)`` to ``(i, j + 1)``.

Regions are sets of coarse blocks, stored as sorted tuples of block indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ConfigurationError(ValueError):
    """Invalid grid or run configuration."""


Region = tuple[int, ...]


@dataclass(frozen=True)
class Box:
    """Rectangular range of fine cells ``[i0, i1) x [j0, j1)``."""

    i0: int
    i1: int
    j0: int
    j1: int

    @property
    def nx(self) -> int:
        return self.i1 - self.i0

    @property
    def ny(self) -> int:
        return self.j1 - self.j0

    def cells(self, nx_fine: int) -> np.ndarray:
        jj, ii = np.mgrid[self.j0:self.j1, self.i0:self.i1]
        return (jj * nx_fine + ii).ravel()

    def nodes(self, nx_fine: int) -> np.ndarray:
        jj, ii = np.mgrid[self.j0:self.j1 + 1, self.i0:self.i1 + 1]
        return (jj * (nx_fine + 1) + ii).ravel()

    def boundary_mask(self) -> np.ndarray:
        """Mask over the box's local nodes (row-major) on the box boundary."""
        mask = np.zeros((self.ny + 1, self.nx + 1), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask.ravel()


@dataclass(frozen=True)
class MeshHierarchy:
    nx_fine: int
    ny_fine: int
    nx_coarse: int
    ny_coarse: int
    Lx: float = 1.0
    Ly: float = 1.0

    # -- sizes -------------------------------------------------------------
    @property
    def rx(self) -> int:
        """Fine cells per coarse block in x."""
        return self.nx_fine // self.nx_coarse

    @property
    def ry(self) -> int:
        return self.ny_fine // self.ny_coarse

    @property
    def hx(self) -> float:
        return self.Lx / self.nx_fine

    @property
    def hy(self) -> float:
        return self.Ly / self.ny_fine

    @property
    def n_cells(self) -> int:
        return self.nx_fine * self.ny_fine

    @property
    def n_nodes(self) -> int:
        return (self.nx_fine + 1) * (self.ny_fine + 1)

    @property
    def n_blocks(self) -> int:
        return self.nx_coarse * self.ny_coarse

    @property
    def n_coarse_nodes(self) -> int:
        return (self.nx_coarse + 1) * (self.ny_coarse + 1)

    @property
    def n_coarse_edges(self) -> int:
        nx, ny = self.nx_coarse, self.ny_coarse
        return nx * (ny + 1) + ny * (nx + 1)

    @property
    def n_fine_edges(self) -> int:
        nx, ny = self.nx_fine, self.ny_fine
        return nx * (ny + 1) + ny * (nx + 1)

    # -- geometry ----------------------------------------------------------
    @cached_property
    def node_coords(self) -> np.ndarray:
        x = np.linspace(0.0, self.Lx, self.nx_fine + 1)
        y = np.linspace(0.0, self.Ly, self.ny_fine + 1)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        x = (np.arange(self.nx_fine) + 0.5) * self.hx
        y = (np.arange(self.ny_fine) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) node indices, local order (0,0), (1,0), (0,1), (1,1)."""
        jj, ii = np.mgrid[0:self.ny_fine, 0:self.nx_fine]
        n0 = (jj * (self.nx_fine + 1) + ii).ravel()
        n2 = n0 + self.nx_fine + 1
        return np.column_stack([n0, n0 + 1, n2, n2 + 1])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        box = Box(0, self.nx_fine, 0, self.ny_fine)
        return np.flatnonzero(box.boundary_mask())

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def cell_block(self) -> np.ndarray:
        jj, ii = np.mgrid[0:self.ny_fine, 0:self.nx_fine]
        return ((jj // self.ry) * self.nx_coarse + ii // self.rx).ravel()

    @cached_property
    def block_cells(self) -> list[np.ndarray]:
        return [self.block_box(b).cells(self.nx_fine) for b in range(self.n_blocks)]

    def block_ij(self, block: int) -> tuple[int, int]:
        return block % self.nx_coarse, block // self.nx_coarse

    def block_box(self, block: int) -> Box:
        I, J = self.block_ij(block)
        return Box(I * self.rx, (I + 1) * self.rx, J * self.ry, (J + 1) * self.ry)

    def coarse_node_ij(self, node: int) -> tuple[int, int]:
        return node % (self.nx_coarse + 1), node // (self.nx_coarse + 1)

    def coarse_node_coords(self) -> np.ndarray:
        x = np.linspace(0.0, self.Lx, self.nx_coarse + 1)
        y = np.linspace(0.0, self.Ly, self.ny_coarse + 1)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def coarse_node_fine_index(self, node: int) -> int:
        I, J = self.coarse_node_ij(node)
        return J * self.ry * (self.nx_fine + 1) + I * self.rx

    # -- topology ----------------------------------------------------------
    def _block(self, I: int, J: int) -> int | None:
        if 0 <= I < self.nx_coarse and 0 <= J < self.ny_coarse:
            return J * self.nx_coarse + I
        return None

    @cached_property
    def node_blocks(self) -> list[Region]:
        """Coarse neighborhood omega_i of every coarse node."""
        out = []
        for node in range(self.n_coarse_nodes):
            I, J = self.coarse_node_ij(node)
            cand = [self._block(I - 1, J - 1), self._block(I, J - 1),
                    self._block(I - 1, J), self._block(I, J)]
            out.append(tuple(sorted(b for b in cand if b is not None)))
        return out

    def block_vertices(self, block: int) -> tuple[int, int, int, int]:
        """Coarse node indices of a block, local order (0,0), (1,0), (0,1), (1,1)."""
        I, J = self.block_ij(block)
        n0 = J * (self.nx_coarse + 1) + I
        n2 = n0 + self.nx_coarse + 1
        return n0, n0 + 1, n2, n2 + 1

    def coarse_edge_nodes(self, edge: int) -> tuple[int, int]:
        nx, ny = self.nx_coarse, self.ny_coarse
        n_h = nx * (ny + 1)
        if edge < n_h:
            I, J = edge % nx, edge // nx
            n0 = J * (nx + 1) + I
            return n0, n0 + 1
        e = edge - n_h
        I, J = e % (nx + 1), e // (nx + 1)
        n0 = J * (nx + 1) + I
        return n0, n0 + nx + 1

    def coarse_edge_is_horizontal(self, edge: int) -> bool:
        return edge < self.nx_coarse * (self.ny_coarse + 1)

    @cached_property
    def edge_blocks(self) -> list[Region]:
        """Coarse neighborhood omega_E of every coarse edge (1 or 2 blocks)."""
        nx, ny = self.nx_coarse, self.ny_coarse
        out = []
        for edge in range(self.n_coarse_edges):
            if self.coarse_edge_is_horizontal(edge):
                I, J = edge % nx, edge // nx
                cand = [self._block(I, J - 1), self._block(I, J)]
            else:
                e = edge - nx * (ny + 1)
                I, J = e % (nx + 1), e // (nx + 1)
                cand = [self._block(I - 1, J), self._block(I, J)]
            out.append(tuple(sorted(b for b in cand if b is not None)))
        return out

    def interior_coarse_edges(self) -> np.ndarray:
        return np.array([e for e, blocks in enumerate(self.edge_blocks) if len(blocks) == 2],
                        dtype=np.int64)

    def coarse_edge_fine_edges(self, edge: int) -> np.ndarray:
        """Fine edge indices composing a coarse edge, in increasing order."""
        nxf, nyf = self.nx_fine, self.ny_fine
        n0, _ = self.coarse_edge_nodes(edge)
        I, J = self.coarse_node_ij(n0)
        if self.coarse_edge_is_horizontal(edge):
            j = J * self.ry
            i = I * self.rx + np.arange(self.rx)
            return j * nxf + i
        i = I * self.rx
        j = J * self.ry + np.arange(self.ry)
        return nxf * (nyf + 1) + j * (nxf + 1) + i

    def region_box(self, region: Region) -> Box:
        """Bounding fine-cell box of a region; the region must be rectangular."""
        Is = [self.block_ij(b)[0] for b in region]
        Js = [self.block_ij(b)[1] for b in region]
        I0, I1, J0, J1 = min(Is), max(Is) + 1, min(Js), max(Js) + 1
        if (I1 - I0) * (J1 - J0) != len(set(region)):
            raise ConfigurationError(f"region {region} is not a rectangle of blocks")
        return Box(I0 * self.rx, I1 * self.rx, J0 * self.ry, J1 * self.ry)

    def region_nodes(self, region: Region) -> np.ndarray:
        return self.region_box(region).nodes(self.nx_fine)

    def region_cells(self, region: Region) -> np.ndarray:
        return np.sort(np.concatenate([self.block_cells[b] for b in region]))


def build_hierarchy(nx_fine: int, ny_fine: int, nx_coarse: int, ny_coarse: int,
                    Lx: float = 1.0, Ly: float = 1.0) -> MeshHierarchy:
    """Build a fine Cartesian grid nested in a coarse one.

    Raises
    ------
    ConfigurationError
        If a count is below one, an extent is not positive, or the fine counts
        are not multiples of the coarse counts.
    """
    counts = dict(nx_fine=nx_fine, ny_fine=ny_fine, nx_coarse=nx_coarse, ny_coarse=ny_coarse)
    for name, value in counts.items():
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    if not (Lx > 0 and Ly > 0):
        raise ConfigurationError(f"domain extents must be positive, got Lx={Lx}, Ly={Ly}")
    if nx_fine % nx_coarse:
        raise ConfigurationError(
            f"nx_fine={nx_fine} is not divisible by nx_coarse={nx_coarse}")
    if ny_fine % ny_coarse:
        raise ConfigurationError(
            f"ny_fine={ny_fine} is not divisible by ny_coarse={ny_coarse}")
    return MeshHierarchy(int(nx_fine), int(ny_fine), int(nx_coarse), int(ny_coarse),
                         float(Lx), float(Ly))


def oversample(hierarchy: MeshHierarchy, region: Region, layers: int = 1) -> Region:
    """Grow a region by ``layers`` coarse blocks in every direction, clipped to the domain.

    Adjacency counts diagonal neighbours, so a 2x2 neighbourhood grows to 4x4.
    """
    if not region:
        raise ValueError("region must be nonempty")
    if layers < 0:
        raise ValueError(f"layers must be >= 0, got {layers}")
    if layers == 0:
        return tuple(sorted(region))
    out = set(region)
    for b in region:
        I, J = hierarchy.block_ij(b)
        for dJ in range(-layers, layers + 1):
            for dI in range(-layers, layers + 1):
                nb = hierarchy._block(I + dI, J + dJ)
                if nb is not None:
                    out.add(nb)
    return tuple(sorted(out))
