"""Content-domain collapse screening.

Per-row statistics (content renormalization, entropy, collapse score), the
per-head tail-risk and layer z-score, and the two logistic gates that turn
them into a smoothing strength ``lambda`` in ``[0, beta]``.

The scalar functions mirror the formulas one-to-one; ``screen_layer`` is the
vectorized path used by the pipeline and is tested against them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from .config import TigsConfig
from .errors import EmptyHeadError, EmptyRegionError, ShapeError
from .tensor_io import AttentionTensor, ContentMask, TensorKind, region_matrix


def content_renormalize(row: np.ndarray, region: Sequence[int], epsilon: float = 1e-10) -> np.ndarray:
    region = np.asarray(region, dtype=np.intp)
    if region.size == 0:
        raise EmptyRegionError("content region is empty")
    row = np.asarray(row, dtype=np.float64)
    sub = row[region]
    return sub / (sub.sum() + epsilon)


def content_entropy(p: np.ndarray, epsilon: float = 1e-10) -> float | np.ndarray:
    """Entropy in nats along the last axis, ``-sum p log(p + eps)``."""
    p = np.asarray(p, dtype=np.float64)
    h = -np.sum(p * np.log(p + epsilon), axis=-1)
    return float(h) if h.ndim == 0 else h


def collapse_score(entropy: float | np.ndarray, content_size: int | np.ndarray) -> float | np.ndarray:
    """``log|C| - H`` for regions of two or more tokens, 0 otherwise."""
    size = np.asarray(content_size)
    ent = np.asarray(entropy, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logn = np.log(np.maximum(size, 1).astype(np.float64))
    c = np.where(size >= 2, logn - ent, 0.0)
    return float(c) if c.ndim == 0 else c


def tail_risk(collapse_scores: Sequence[float], k: int) -> float:
    """Mean of the ``min(k, n)`` largest scores."""
    scores = np.asarray(collapse_scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyHeadError("head has no scoreable rows")
    top = np.sort(scores)[::-1][: min(k, scores.size)]
    return float(top.mean())


def layer_zscores(tail_risks: Sequence[float], epsilon: float = 1e-10) -> np.ndarray:
    """Standardize tail risks within a layer (population standard deviation)."""
    r = np.asarray(tail_risks, dtype=np.float64)
    return (r - r.mean()) / (r.std() + epsilon)


def head_gate(z: float | np.ndarray, r: float | np.ndarray, cfg: TigsConfig) -> float | np.ndarray:
    g = 1.0 - expit(cfg.eta_h * (cfg.tau_h - np.asarray(z))) * expit(cfg.eta_R * (cfg.tau_R - np.asarray(r)))
    return float(g) if np.ndim(g) == 0 else g


def row_gate(collapse: float | np.ndarray, cfg: TigsConfig) -> float | np.ndarray:
    g = expit(cfg.eta_c * (np.asarray(collapse) - cfg.tau_c))
    return float(g) if np.ndim(g) == 0 else g


def smoothing_strength(head_gate: float | np.ndarray, row_gate: float | np.ndarray, beta: float) -> float | np.ndarray:
    lam = beta * np.asarray(head_gate) * np.asarray(row_gate)
    return float(lam) if np.ndim(lam) == 0 else lam


# --------------------------------------------------------------------------
# Report types


@dataclass(frozen=True)
class RowScreen:
    content_size: int
    entropy: float
    collapse: float
    row_gate: float
    lam: float


@dataclass(frozen=True)
class HeadScreen:
    tail_risk: float
    zscore: float
    head_gate: float
    rows: list[RowScreen]
    scoreable: bool = True


@dataclass
class LayerScreen:
    """Screening arrays for one layer; rows with empty regions have ``lam == 0``."""

    entropy: np.ndarray  # [H, Q]
    collapse: np.ndarray  # [H, Q]
    row_gate: np.ndarray  # [H, Q]
    lam: np.ndarray  # [H, Q]
    tail_risk: np.ndarray  # [H]
    zscore: np.ndarray  # [H]; -inf for heads without scoreable rows
    head_gate: np.ndarray  # [H]
    scoreable: np.ndarray  # [H] bool
    mu: float
    sigma: float
    content_size: np.ndarray  # [Q]
    defended: bool = True


def screen_layer(
    probs: np.ndarray,
    region: np.ndarray,
    cfg: TigsConfig,
    eligible_rows: np.ndarray | None = None,
) -> LayerScreen:
    """Screen one layer of attention probabilities.

    ``probs`` is ``[H, Q, K]``; ``region`` is the boolean ``[Q, K]`` content
    region. Rows outside ``eligible_rows`` are scored (they count toward the
    tail risk) but their ``lam`` is forced to 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    eps = cfg.epsilon
    n_heads, n_rows, _ = probs.shape
    size = region.sum(axis=-1)
    masked = np.where(region, probs, 0.0)
    p = masked / (masked.sum(axis=-1, keepdims=True) + eps)
    entropy = content_entropy(p, eps)
    collapse = np.where(size >= 2, collapse_score(entropy, size), 0.0)
    entropy = np.where(size >= 1, entropy, 0.0)

    scoreable_rows = size >= 1
    n_score = int(scoreable_rows.sum())
    scoreable = np.full(n_heads, n_score > 0)
    if n_score:
        scores = collapse[:, scoreable_rows]
        top = -np.sort(-scores, axis=-1)[:, : min(cfg.k, n_score)]
        tail = top.mean(axis=-1)
        mu = float(tail.mean())
        sigma = float(tail.std())
        z = layer_zscores(tail, eps)
    else:
        # Every head empty: excluded from statistics, Z at its -inf limit, R = 0.
        tail = np.zeros(n_heads)
        mu = sigma = 0.0
        z = np.full(n_heads, -np.inf)

    gh = head_gate(z, tail, cfg)
    gr = row_gate(collapse, cfg)
    lam = smoothing_strength(np.asarray(gh)[:, None], gr, cfg.beta)
    active = scoreable_rows if eligible_rows is None else scoreable_rows & eligible_rows
    lam = np.where(active[None, :], lam, 0.0)
    return LayerScreen(
        entropy=entropy,
        collapse=collapse,
        row_gate=np.asarray(gr),
        lam=lam,
        tail_risk=tail,
        zscore=np.asarray(z, dtype=np.float64),
        head_gate=np.asarray(gh),
        scoreable=scoreable,
        mu=mu,
        sigma=sigma,
        content_size=size.astype(np.int64),
    )


@dataclass
class ScreeningReport:
    """Screening evidence for every layer/head/row, stacked as arrays."""

    entropy: np.ndarray  # [L, H, Q]
    collapse: np.ndarray
    row_gate: np.ndarray
    lam: np.ndarray
    tail_risk: np.ndarray  # [L, H]
    zscore: np.ndarray
    head_gate: np.ndarray
    scoreable: np.ndarray
    mu: np.ndarray  # [L]
    sigma: np.ndarray
    content_size: np.ndarray  # [Q]
    defended: np.ndarray  # [L] bool
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.collapse.shape)  # type: ignore[return-value]

    @classmethod
    def from_layers(cls, layers: Sequence[LayerScreen], config: dict[str, Any] | None = None) -> "ScreeningReport":
        if not layers:
            raise ShapeError("report needs at least one layer")
        stack = lambda name: np.stack([getattr(ls, name) for ls in layers])  # noqa: E731
        return cls(
            entropy=stack("entropy"),
            collapse=stack("collapse"),
            row_gate=stack("row_gate"),
            lam=stack("lam"),
            tail_risk=stack("tail_risk"),
            zscore=stack("zscore"),
            head_gate=stack("head_gate"),
            scoreable=stack("scoreable"),
            mu=np.array([ls.mu for ls in layers]),
            sigma=np.array([ls.sigma for ls in layers]),
            content_size=layers[0].content_size,
            defended=np.array([ls.defended for ls in layers]),
            config=dict(config or {}),
        )

    def scoreable_rows(self) -> np.ndarray:
        return self.content_size >= 1

    def head(self, layer: int, head: int) -> HeadScreen:
        rows = [
            RowScreen(
                content_size=int(self.content_size[i]),
                entropy=float(self.entropy[layer, head, i]),
                collapse=float(self.collapse[layer, head, i]),
                row_gate=float(self.row_gate[layer, head, i]),
                lam=float(self.lam[layer, head, i]),
            )
            for i in range(self.collapse.shape[2])
        ]
        return HeadScreen(
            tail_risk=float(self.tail_risk[layer, head]),
            zscore=float(self.zscore[layer, head]),
            head_gate=float(self.head_gate[layer, head]),
            rows=rows,
            scoreable=bool(self.scoreable[layer, head]),
        )

    def to_dict(self) -> dict[str, Any]:
        n_layers, n_heads, n_rows = self.collapse.shape
        layers = []
        for l in range(n_layers):
            heads = []
            for h in range(n_heads):
                z = float(self.zscore[l, h])
                heads.append(
                    {
                        "R": float(self.tail_risk[l, h]),
                        "Z": z if math.isfinite(z) else None,
                        "g_head": float(self.head_gate[l, h]),
                        "scoreable": bool(self.scoreable[l, h]),
                        "rows": [
                            {
                                "C": float(self.collapse[l, h, i]),
                                "H": float(self.entropy[l, h, i]),
                                "g_row": float(self.row_gate[l, h, i]),
                                "lambda": float(self.lam[l, h, i]),
                                "n": int(self.content_size[i]),
                            }
                            for i in range(n_rows)
                        ],
                    }
                )
            layers.append(
                {
                    "mu": float(self.mu[l]),
                    "sigma": float(self.sigma[l]),
                    "defended": bool(self.defended[l]),
                    "heads": heads,
                }
            )
        out: dict[str, Any] = {"layers": layers}
        if self.config:
            out["config"] = self.config
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScreeningReport":
        layers = data["layers"]
        if not layers or not layers[0]["heads"]:
            raise ShapeError("report has no layers or heads")

        def grab(key: str) -> np.ndarray:
            return np.array([[[r[key] for r in hd["rows"]] for hd in ly["heads"]] for ly in layers], dtype=np.float64)

        zs = [[(-np.inf if hd["Z"] is None else hd["Z"]) for hd in ly["heads"]] for ly in layers]
        first_rows = layers[0]["heads"][0]["rows"]
        return cls(
            entropy=grab("H"),
            collapse=grab("C"),
            row_gate=grab("g_row"),
            lam=grab("lambda"),
            tail_risk=np.array([[hd["R"] for hd in ly["heads"]] for ly in layers], dtype=np.float64),
            zscore=np.array(zs, dtype=np.float64),
            head_gate=np.array([[hd["g_head"] for hd in ly["heads"]] for ly in layers], dtype=np.float64),
            scoreable=np.array([[hd.get("scoreable", True) for hd in ly["heads"]] for ly in layers], dtype=bool),
            mu=np.array([ly["mu"] for ly in layers], dtype=np.float64),
            sigma=np.array([ly["sigma"] for ly in layers], dtype=np.float64),
            content_size=np.array([r.get("n", 2) for r in first_rows], dtype=np.int64),
            defended=np.array([ly.get("defended", True) for ly in layers], dtype=bool),
            config=dict(data.get("config", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "ScreeningReport":
        return cls.from_dict(json.loads(text))


def screening_region(mask: ContentMask, n_queries: int, causal: bool, cfg: TigsConfig) -> np.ndarray:
    """Boolean ``[Q, K]`` region used for screening under ``cfg``.

    With ``use_content_mask`` off (ablation), every visible key counts as content.
    """
    if cfg.use_content_mask:
        return region_matrix(mask, n_queries, causal, cfg.exclude_self)
    return region_matrix(np.ones(len(mask), dtype=bool), n_queries, causal, cfg.exclude_self)


def screen_tensor(attn: AttentionTensor, mask: ContentMask, cfg: TigsConfig) -> ScreeningReport:
    """Screen every layer of a probability tensor (no phase filtering)."""
    if attn.kind is not TensorKind.PROBABILITIES:
        raise ValueError("screen_tensor expects a probability tensor")
    if len(mask) != attn.n_keys:
        raise ShapeError(f"mask length {len(mask)} does not match key extent {attn.n_keys}")
    region = screening_region(mask, attn.n_queries, attn.causal, cfg)
    layers = [screen_layer(attn.data[l], region, cfg) for l in range(attn.n_layers)]
    return ScreeningReport.from_layers(layers, cfg.to_dict())
