"""Seed derivation and small linear-algebra helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """Stable 63-bit seed from (master, purpose tag, index)."""
    digest = hashlib.sha256(f"{int(master)}:{tag}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(master: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, index))


def orthonormalize(gram: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Coefficients ``T`` with ``T.T @ gram @ T = I``.

    Directions whose Gram eigenvalue falls below ``rtol * max`` are dropped.
    """
    d, Q = np.linalg.eigh(gram)
    if d.size == 0 or d[-1] <= 0:
        return np.zeros((gram.shape[0], 0))
    keep = d > rtol * d[-1]
    # largest directions first keeps the leading test vectors stable
    order = np.flatnonzero(keep)[::-1]
    return Q[:, order] / np.sqrt(d[order])
