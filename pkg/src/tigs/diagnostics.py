"""Mechanism-validation statistics and rank-heatmap export."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .screening import ScreeningReport


@dataclass(frozen=True)
class MechanismStats:
    c_max: float
    r_max: float
    activated_fraction: float
    row_fpr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def mechanism_stats(report: ScreeningReport, lambda_act: float) -> MechanismStats:
    """Peak collapse, peak tail risk, and the fractions of heads/rows above ``lambda_act``.

    ``row_fpr`` is taken over rows with a non-empty content region.
    """
    n_layers, n_heads, _ = report.collapse.shape
    if n_layers * n_heads == 0:
        raise ValueError("empty report")
    scoreable = report.scoreable_rows()
    lam = report.lam[:, :, scoreable]
    head_max = lam.max(axis=-1) if lam.shape[-1] else np.zeros((n_layers, n_heads))
    n_rows = lam.size
    return MechanismStats(
        c_max=float(report.collapse.max()),
        r_max=float(report.tail_risk.max()),
        activated_fraction=float((head_max > lambda_act).sum() / (n_layers * n_heads)),
        row_fpr=float((lam > lambda_act).sum() / n_rows) if n_rows else 0.0,
    )


def lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sequence")
    return float(ordered[(len(ordered) - 1) // 2])


def group_separation(
    stats_a: Sequence[MechanismStats], stats_b: Sequence[MechanismStats]
) -> tuple[float, float, float]:
    """Lower medians of ``c_max`` per group and their difference ``b - a``."""
    med_a = lower_median([s.c_max for s in stats_a])
    med_b = lower_median([s.c_max for s in stats_b])
    return med_a, med_b, med_b - med_a


def dense_rank_desc(values: Sequence[float]) -> list[int]:
    """Dense rank, 1 for the largest value; equal values share a rank."""
    distinct = sorted(set(float(v) for v in values), reverse=True)
    position = {v: r + 1 for r, v in enumerate(distinct)}
    return [position[float(v)] for v in values]


def rank_table(report: ScreeningReport) -> list[tuple[int, int, float, int]]:
    rows = []
    for layer, risks in enumerate(report.tail_risk):
        ranks = dense_rank_desc(risks)
        # Within a layer rows are listed by rank, ties by ascending head index.
        order = sorted(range(len(risks)), key=lambda h: (ranks[h], h))
        rows.extend((layer, h, float(risks[h]), ranks[h]) for h in order)
    return rows


def export_rank_heatmap(report: ScreeningReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "head", "tail_risk", "rank"])
        for layer, head, risk, rank in rank_table(report):
            writer.writerow([layer, head, repr(risk), rank])


def read_rank_heatmap(path: str | os.PathLike) -> list[tuple[int, int, float, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            (int(r["layer"]), int(r["head"]), float(r["tail_risk"]), int(r["rank"]))
            for r in csv.DictReader(fh)
        ]
