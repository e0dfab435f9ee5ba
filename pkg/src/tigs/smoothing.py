"""Dual-scale shrinkage and intrinsic smoothing of the content distribution.

Two equivalent routes produce the anchored content distribution ``q``:

* ``anchor_smooth_logits``: softmax of linearly shrunk content logits;
* ``power_smooth``: normalized ``p ** alpha`` of the content probabilities.

Both are the minimizer of ``KL(q || p) - gamma_c * lam * H(q)`` on the
content simplex; ``smoothing_objective`` evaluates that objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class ShrinkPair:
    alpha_c: float
    alpha_r: float


def shrink_factors(lam: float, gamma_c: float, gamma_r: float) -> ShrinkPair:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ShrinkPair(alpha_c=1.0 / (1.0 + gamma_c * lam), alpha_r=1.0 / (1.0 + gamma_r * lam))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def anchor_smooth_logits(content_logits: np.ndarray, alpha_c: float) -> np.ndarray:
    """``softmax(alpha_c * s)`` over the content logits."""
    s = np.asarray(content_logits, dtype=np.float64)
    if s.size == 0:
        raise ValueError("content logits are empty")
    if not np.all(np.isfinite(s)):
        raise ValueError("content logits must be finite")
    return softmax(alpha_c * s)


def power_smooth(p: np.ndarray, alpha_c: float, epsilon: float = 1e-10) -> np.ndarray:
    """Normalized ``p ** alpha_c``, computed in log space.

    Zero entries stay exactly zero; a row whose total mass is below
    ``epsilon`` is rejected.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or not p.sum() > epsilon:
        raise ValueError("power_smooth needs a distribution with positive mass")
    out = np.zeros_like(p)
    pos = p > 0
    logw = alpha_c * np.log(p[pos])
    out[pos] = np.exp(logw - logsumexp(logw))
    return out


def entropy_nats(q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)))


def smoothing_objective(q: np.ndarray, p: np.ndarray, strength: float) -> float:
    """``KL(q || p) - strength * H(q)`` with the ``0 log 0 = 0`` convention."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    nz = q > 0
    kl = float(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))))
    return kl - strength * entropy_nats(q)
