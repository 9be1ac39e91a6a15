"""Per-fine-cell coefficient fields, their time law, and plain-text I/O."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .mesh import MeshHierarchy


class FieldError(ValueError):
    """Malformed or non-physical coefficient data."""


@dataclass(frozen=True)
class ContrastLaw:
    """Affine rescale so that ``max/min == c0 * exp(r * t)``."""

    c0: float
    r: float

    def ratio(self, t: float) -> float:
        return self.c0 * np.exp(self.r * t)


@dataclass(frozen=True)
class CoefficientField:
    """Cell values in lower-left row-major order (``values[j * nx + i]``)."""

    values: np.ndarray
    nx: int
    ny: int
    time_law: ContrastLaw | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.nx * self.ny:
            raise FieldError(f"expected {self.nx * self.ny} values, got {values.size}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise FieldError("coefficient values must be finite and positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def contrast(self) -> float:
        return float(self.values.max() / self.values.min())

    def as_grid(self) -> np.ndarray:
        """ny x nx array with the bottom row first."""
        return self.values.reshape(self.ny, self.nx)

    def block(self, box) -> np.ndarray:
        return self.as_grid()[box.j0:box.j1, box.i0:box.i1]

    def scaled(self, c: float) -> "CoefficientField":
        return replace(self, values=self.values * c)


def uniform_field(hierarchy: MeshHierarchy, value: float = 1.0) -> CoefficientField:
    return CoefficientField(np.full(hierarchy.n_cells, float(value)),
                            hierarchy.nx_fine, hierarchy.ny_fine)


def evaluate_at(field: CoefficientField, t: float) -> CoefficientField:
    """Field at time ``t``; a copy without a time law.

    Under a contrast law the values become ``vmin + (v - vmin) * s`` with ``s``
    chosen so that the max/min ratio is ``c0 * exp(r t)``.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    law = field.time_law
    if law is None:
        return field
    vmin, vmax = field.values.min(), field.values.max()
    if vmax == vmin:
        raise FieldError("contrast law is undefined for a constant field")
    target = law.ratio(t)
    s = vmin * (target - 1.0) / (vmax - vmin)
    return CoefficientField(vmin + (field.values - vmin) * s, field.nx, field.ny)


def load_field(path: str | Path, hierarchy: MeshHierarchy,
               time_law: ContrastLaw | None = None) -> CoefficientField:
    """Read a whitespace-separated ``ny_fine x nx_fine`` matrix, top row first."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(line.split())
    ny, nx = hierarchy.ny_fine, hierarchy.nx_fine
    if len(rows) != ny:
        raise FieldError(f"{path}: expected {ny} rows, found {len(rows)}")
    grid = np.empty((ny, nx))
    for r, tokens in enumerate(rows):
        if len(tokens) != nx:
            raise FieldError(f"{path}: row {r} has {len(tokens)} columns, expected {nx}")
        for c, tok in enumerate(tokens):
            try:
                v = float(tok)
            except ValueError:
                raise FieldError(f"{path}: unparsable entry {tok!r} at row {r}, column {c}")
            if not np.isfinite(v) or v <= 0:
                raise FieldError(f"{path}: non-positive or non-finite entry {tok} "
                                 f"at row {r}, column {c}")
            grid[r, c] = v
    # file is top row first; internal storage is bottom row first
    return CoefficientField(grid[::-1].ravel(), nx, ny, time_law)


def save_field(path: str | Path, field: CoefficientField) -> None:
    np.savetxt(path, field.as_grid()[::-1], fmt="%.17g")


def generate_channel_field(hierarchy: MeshHierarchy, background: float = 1.0,
                           contrast: float = 1000.0, num_channels: int = 4,
                           seed: int = 0) -> CoefficientField:
    """Synthetic high-contrast medium: thin horizontal/vertical stripes plus inclusions.

    Channels alternate orientation and span most of the domain; a few small
    rectangular inclusions are scattered on top. Values are ``background`` or
    ``background * contrast``.
    """
    rng = np.random.default_rng(seed)
    nx, ny = hierarchy.nx_fine, hierarchy.ny_fine
    grid = np.full((ny, nx), float(background))
    high = background * contrast
    width_y = max(1, ny // 50)
    width_x = max(1, nx // 50)
    for k in range(num_channels):
        if k % 2 == 0:
            j = rng.integers(ny // 10, ny - ny // 10 - width_y + 1)
            i0 = rng.integers(0, nx // 5 + 1)
            i1 = nx - rng.integers(0, nx // 5 + 1)
            grid[j:j + width_y, i0:i1] = high
        else:
            i = rng.integers(nx // 10, nx - nx // 10 - width_x + 1)
            j0 = rng.integers(0, ny // 5 + 1)
            j1 = ny - rng.integers(0, ny // 5 + 1)
            grid[j0:j1, i:i + width_x] = high
    n_incl = 2 * num_channels
    for _ in range(n_incl):
        wi = rng.integers(1, max(2, nx // 25) + 1)
        wj = rng.integers(1, max(2, ny // 25) + 1)
        i = rng.integers(0, nx - wi + 1)
        j = rng.integers(0, ny - wj + 1)
        grid[j:j + wj, i:i + wi] = high
    return CoefficientField(grid.ravel(), nx, ny)
