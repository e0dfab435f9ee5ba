"""Controlled full-row write-back and the KL identities that certify it."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, SupportError


class SkippedRowWarning(UserWarning):
    """Emitted when ``write_back`` passes a row through because its region is empty."""


@dataclass(frozen=True)
class RowRewrite:
    original_mass: float
    rewritten_mass: float
    content_dist: np.ndarray
    row_out: np.ndarray


def content_mass(row: np.ndarray, region: Sequence[int]) -> float:
    region = np.asarray(region, dtype=np.intp)
    if region.size == 0:
        return 0.0
    return float(np.asarray(row, dtype=np.float64)[region].sum())


def rewritten_mass(alpha_r: float, m: float) -> float:
    return 1.0 - alpha_r * (1.0 - m)


def rewrite_row(row: np.ndarray, q: np.ndarray, region: Sequence[int], alpha_r: float) -> RowRewrite:
    row = np.asarray(row, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    region = np.asarray(region, dtype=np.intp)
    if region.size == 0:
        warnings.warn("empty content region; row passed through", SkippedRowWarning, stacklevel=2)
        return RowRewrite(0.0, 0.0, q, row.copy())
    if q.shape != region.shape:
        raise ShapeError("q must have one entry per region index")
    m = content_mass(row, region)
    outside = np.ones(row.size, dtype=bool)
    outside[region] = False
    # With no non-content mass alpha_r is irrelevant and rho is 1 exactly.
    rho = 1.0 if not np.any(row[outside] > 0) else rewritten_mass(alpha_r, m)
    out = alpha_r * row
    out[region] = rho * q
    return RowRewrite(m, rho, q, out)


def write_back(row: np.ndarray, q: np.ndarray, region: Sequence[int], alpha_r: float) -> np.ndarray:
    """Content block ``rho * q``, non-content block ``alpha_r * row``."""
    return rewrite_row(row, q, region, alpha_r).row_out


def kl_divergence(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("kl_divergence needs equal shapes")
    nz = x > 0
    if np.any(y[nz] <= 0):
        raise SupportError("support of x is not contained in support of y")
    return float(np.sum(x[nz] * (np.log(x[nz]) - np.log(y[nz]))))


def bernoulli_kl(a: float, b: float) -> float:
    """``KL(Bern(a) || Bern(b))`` with the ``0 log 0 = 0`` convention."""
    return kl_divergence(np.array([a, 1.0 - a]), np.array([b, 1.0 - b]))


def kl_decomposition_check(
    row_out: np.ndarray,
    row_in: np.ndarray,
    rho: float,
    m: float,
    q: np.ndarray,
    p: np.ndarray,
) -> tuple[float, float]:
    """Return ``KL(row_out || row_in)`` and ``KL(Bern(rho)||Bern(m)) + rho KL(q||p)``."""
    row_out = np.asarray(row_out, dtype=np.float64)
    row_in = np.asarray(row_in, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if row_out.shape != row_in.shape or q.shape != p.shape or q.size > row_in.size:
        raise ShapeError("inconsistent shapes for KL decomposition")
    lhs = kl_divergence(row_out, row_in)
    rhs = bernoulli_kl(rho, m) + rho * kl_divergence(q, p)
    return lhs, rhs


def rho_derivative(lam: float, gamma_r: float, m: float) -> float:
    """Analytic ``d rho / d lambda`` for ``rho = 1 - (1 - m) / (1 + gamma_r lam)``."""
    return gamma_r * (1.0 - m) / (1.0 + gamma_r * lam) ** 2
