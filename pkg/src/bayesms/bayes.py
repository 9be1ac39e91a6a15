"""Residual-driven priors and posterior log-densities over basis selections."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)

EPS = 1e-6


@dataclass(frozen=True)
class PriorModel:
    """Inclusion probabilities for one coarse interval.

    ``candidate_p[r]`` holds the probabilities of region ``r``'s candidates
    in catalog order.
    """

    region_p: np.ndarray
    candidate_p: tuple
    n_omega: float
    n_basis: float
    local_norms: np.ndarray = field(default=None)
    global_norm: float = 0.0

    def flat_candidate_p(self) -> np.ndarray:
        return np.concatenate(self.candidate_p) if self.candidate_p else np.zeros(0)


@dataclass(frozen=True)
class PosteriorSpec:
    variant: str = "around_fixed"
    sigma_L: float = 1e-3
    obs_index: np.ndarray | None = None
    observed: np.ndarray | None = None
    sigma_d: float | None = None

    def __post_init__(self):
        if self.variant not in ("around_fixed", "around_previous"):
            raise ValueError(f"unknown posterior variant {self.variant!r}")
        if not self.sigma_L > 0:
            raise ValueError("sigma_L must be positive")
        if self.obs_index is not None:
            if self.sigma_d is None or not self.sigma_d > 0:
                raise ValueError("sigma_d must be positive when observations are given")
            if self.observed is None or len(self.observed) != len(self.obs_index):
                raise ValueError("observed values must match the observation indices")

    @property
    def has_data(self) -> bool:
        return self.obs_index is not None

    def log_density(self, residual_norm: float, state: np.ndarray | None = None) -> float:
        """Likelihood plus data factor; the beta prior is flat (infinite scale)."""
        out = log_likelihood(residual_norm, self.sigma_L)
        if self.has_data and state is not None:
            out += log_data_factor(np.asarray(state)[self.obs_index], self.observed, self.sigma_d)
        return out


def region_prior(local_norms, global_norm: float, n_omega: float) -> np.ndarray:
    """``min(alpha_hat, 1)`` with ``alpha = local/global`` rescaled to sum ``n_omega``."""
    local = np.asarray(local_norms, dtype=float)
    if np.any(local < 0) or global_norm < 0:
        raise ValueError("residual norms must be nonnegative")
    if n_omega < 1:
        raise ValueError("n_omega must be >= 1")
    if global_norm == 0 or not np.any(local > 0):
        return np.zeros_like(local)
    alpha = local / global_norm
    alpha_hat = alpha * n_omega / alpha.sum()
    return np.minimum(alpha_hat, 1.0)


def _abs_corr(a: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """|Pearson correlation| of ``a`` with every column of ``B``; second output flags zero variance."""
    a = a - a.mean()
    B = B - B.mean(axis=0)
    na = np.sqrt(a @ a)
    nb = np.sqrt((B * B).sum(axis=0))
    dead = nb <= 1e-300
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.abs(a @ B) / (na * nb)
    c[dead] = 0.0
    if na == 0:
        c[:] = 0.0
    return np.clip(c, 0.0, 1.0), dead


def basis_prior(residual_slice, candidate_images, n_basis: float) -> np.ndarray:
    """Candidate probabilities from residual correlation, normalized to ``n_basis`` and clamped.

    ``candidate_images`` has one column per candidate in the residual's test
    coordinates.
    """
    r = np.asarray(residual_slice, dtype=float).ravel()
    Im = np.asarray(candidate_images, dtype=float).reshape(r.size, -1)
    if Im.shape[1] == 0:
        raise ValueError("basis_prior needs at least one candidate")
    alpha, dead = _abs_corr(r, Im)
    if dead.any():
        log.warning("%d candidate image(s) with zero variance get prior 0", int(dead.sum()))
    total = alpha.sum()
    if total == 0:
        return np.zeros_like(alpha)
    return np.minimum(alpha * n_basis / total, 1.0)


def log_likelihood(residual_norm: float, sigma_L: float) -> float:
    if not sigma_L > 0:
        raise ValueError("sigma_L must be positive")
    return -float(residual_norm) ** 2 / sigma_L ** 2


def log_data_factor(predicted, observed, sigma_d: float) -> float:
    p = np.asarray(predicted, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    if p.size != o.size:
        raise ValueError(f"{p.size} predictions for {o.size} observations")
    if p.size == 0:
        return 0.0
    if not sigma_d > 0:
        raise ValueError("sigma_d must be positive")
    d = p - o
    return -float(d @ d) / sigma_d ** 2


def clamp(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


def flip_log_odds(prior_alpha: float, residual_sq_without: float, residual_sq_with: float,
                  gram_penalty: float, sigma_L: float) -> float:
    """Log-odds of including a candidate given everything else."""
    a = float(clamp(prior_alpha))
    if gram_penalty <= 0:
        return -np.inf
    return (np.log(a) - np.log1p(-a) + np.log(gram_penalty)
            + (residual_sq_without - residual_sq_with) / sigma_L ** 2)


def gibbs_flip_probability(prior_alpha: float, residual_sq_without: float,
                           residual_sq_with: float, gram_penalty: float,
                           sigma_L: float) -> float:
    z = flip_log_odds(prior_alpha, residual_sq_without, residual_sq_with, gram_penalty, sigma_L)
    if z == -np.inf:
        return 0.0
    # logistic in a numerically safe form
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    e = np.exp(z)
    return float(e / (1.0 + e))


def gram_penalty(active_columns, candidate_column, inner=None) -> float:
    """Volume factor for adding ``candidate_column`` to ``active_columns``.

    Columns are normalized in the inner product ``inner`` (identity when
    None). The value is ``det G(active + candidate) / det G(active)``: 1 when
    the candidate is orthogonal to the active set, 0 when it lies in its span.
    """
    A = np.asarray(active_columns, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    c = np.asarray(candidate_column, dtype=float).ravel()
    W = (lambda x: x) if inner is None else (lambda x: inner @ x)
    ca = np.sqrt(c @ W(c))
    if ca == 0:
        return 0.0
    c = c / ca
    if A.shape[1] == 0:
        return 1.0
    WA = W(A)
    norms = np.sqrt(np.einsum("ij,ij->j", A, WA))
    A = A / norms
    WA = WA / norms
    return gram_penalty_from_gram(A.T @ WA, A.T @ W(c))


def gram_penalty_from_gram(G_active: np.ndarray, g: np.ndarray) -> float:
    """``1 - g^T G^-1 g`` for unit-normalized columns (Schur complement of the Gram)."""
    if g.size == 0:
        return 1.0
    try:
        L = np.linalg.cholesky(G_active)
        y = solve_triangular(L, g, lower=True, check_finite=False)
        val = 1.0 - float(y @ y)
    except np.linalg.LinAlgError:
        x = np.linalg.lstsq(G_active, g, rcond=1e-12)[0]
        val = 1.0 - float(g @ x)
    return float(min(max(val, 0.0), 1.0))
