"""Errors against oracles, cross-sampler comparisons and CSV output."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


@dataclass
class ErrorValue:
    value: float
    absolute: bool = False

    def __post_init__(self):
        self.value = float(self.value)

    def __float__(self):
        return self.value


def l2_error(sample, reference, mass) -> ErrorValue:
    """``sqrt((e, M e) / (u, M u))``; absolute (flagged) when the reference vanishes."""
    s = np.asarray(sample, dtype=float)
    u = np.asarray(reference, dtype=float)
    if s.shape != u.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {u.shape}")
    e = s - u
    num = float(e @ (mass @ e))
    den = float(u @ (mass @ u))
    if den == 0.0:
        return ErrorValue(np.sqrt(max(num, 0.0)), absolute=True)
    return ErrorValue(np.sqrt(max(num, 0.0) / den))


def relative_l2(sample, reference, mass) -> float:
    return l2_error(sample, reference, mass).value


def frequency_correlation(freq_a, freq_b) -> float:
    """Pearson correlation; NaN (with a warning) when either vector is constant."""
    a = np.asarray(freq_a, dtype=float)
    b = np.asarray(freq_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"frequency vectors differ in length: {a.size} vs {b.size}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        warnings.warn("frequency correlation undefined for a constant vector", RuntimeWarning)
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def coverage_check(samples, reference, ks=(1, 2, 3)) -> dict[int, float]:
    """Fraction of entries with ``|mean - reference| <= k * std`` over the sample axis."""
    X = np.asarray(samples, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("coverage needs at least two samples")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    dev = np.abs(mean - np.asarray(reference, dtype=float))
    return {k: float(np.mean(dev <= k * std)) for k in ks}


def jensen_check(sample_states, reference, mass, tol: float = 1e-12) -> bool:
    """True when ``error(mean) <= mean(error) + tol`` (convexity of the norm)."""
    X = np.asarray(sample_states, dtype=float)
    e_mean = relative_l2(X.mean(axis=0), reference, mass)
    mean_e = np.mean([relative_l2(x, reference, mass) for x in X])
    ok = e_mean <= mean_e + tol
    if not ok:
        log.warning("error of the mean %.3e exceeds mean error %.3e", e_mean, mean_e)
    return ok


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_table(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        data = [[float(x) for x in row] for row in r]
    return header, np.array(data).reshape(len(data), len(header))


def write_grid(path: str | Path, values, nx: int, ny: int) -> None:
    """Cell field as an ny x nx comma-separated grid, top row first like field files."""
    grid = np.asarray(values, dtype=float).reshape(ny, nx)[::-1]
    with open(path, "w") as fh:
        for row in grid:
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def read_grid(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_grid`: returns the grid bottom row first."""
    return np.loadtxt(path, delimiter=",", ndmin=2)[::-1]


def write_chain_tables(out_dir: str | Path, chain, prefix: str, n_candidates: int) -> None:
    """Residual/error trace, basis-count trace and per-candidate frequencies of one chain."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / f"{prefix}_trace.csv", ["record", "residual_norm", "error", "n_candidates"],
                [(i, r.residual_norm, np.nan if r.error is None else r.error,
                  r.selection.n_candidates) for i, r in enumerate(chain.records)])
    bits = np.array([r.selection.I for r in chain.records], dtype=float).reshape(-1, n_candidates)
    freq = bits.mean(axis=0) if len(bits) else np.zeros(n_candidates)
    write_table(out / f"{prefix}_frequency.csv", ["candidate", "frequency"],
                [(k, float(f)) for k, f in enumerate(freq)])
