"""End-to-end defended forward pass.

``tigs_transform`` runs screen -> smooth -> write-back over a stored logit
tensor. ``toy_forward`` embeds the same per-layer step in a small seeded
multi-head transformer so the defense can be exercised inside a real
forward pass, and ``bench`` times defended against undefended runs.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Phase, TigsConfig
from .errors import ShapeError
from .screening import LayerScreen, ScreeningReport, screen_layer, screening_region
from .tensor_io import (
    AttentionTensor,
    ContentMask,
    TensorKind,
    apply_causal_sentinel,
    save_tensor,
)

@dataclass
class Instrumentation:
    """Counts full attention-row softmax evaluations per layer."""

    softmax_rows: Counter = field(default_factory=Counter)

    def total(self) -> int:
        return sum(self.softmax_rows.values())


def attention_softmax(logits: np.ndarray, layer: int, instrument: Instrumentation | None) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    if instrument is not None:
        instrument.softmax_rows[layer] += int(np.prod(logits.shape[:-1]))
    return probs


def apply_phase(cfg: TigsConfig, row_index: int, prefill_len: int) -> bool:
    if cfg.phase is Phase.PREFILL_ONLY:
        return row_index < prefill_len
    if cfg.phase is Phase.DECODE_ONLY:
        return row_index >= prefill_len
    return True


def eligible_rows(cfg: TigsConfig, n_rows: int) -> np.ndarray:
    prefill_len = n_rows if cfg.prefill_len is None else cfg.prefill_len
    if prefill_len > n_rows:
        raise ValueError(f"prefill_len {prefill_len} exceeds the {n_rows} query rows")
    return np.array([apply_phase(cfg, i, prefill_len) for i in range(n_rows)], dtype=bool)


def _tick(timing: dict[str, int] | None, stage: str, start: int) -> int:
    now = time.perf_counter_ns()
    if timing is not None:
        timing[stage] = timing.get(stage, 0) + now - start
    return now


def defend_layer(
    logits: np.ndarray,
    region: np.ndarray,
    cfg: TigsConfig,
    *,
    layer: int = 0,
    defended: bool = True,
    eligible: np.ndarray | None = None,
    instrument: Instrumentation | None = None,
    timing: dict[str, int] | None = None,
) -> tuple[np.ndarray, LayerScreen]:
    """Softmax, screen, smooth and write back one layer of ``[H, Q, K]`` logits.

    All heads are screened before any row is rewritten, since the z-scores
    depend on the whole layer. Rows with ``lam == 0`` are returned bit-identical
    to the plain softmax.
    """
    t = time.perf_counter_ns()
    probs = attention_softmax(logits, layer, instrument)
    t = _tick(timing, "softmax", t)
    screen = screen_layer(probs, region, cfg, eligible)
    t = _tick(timing, "screen", t)
    if not defended:
        screen.lam = np.zeros_like(screen.lam)
        screen.defended = False
        return probs, screen

    lam = screen.lam
    active = lam > 0
    if not np.any(active):
        return probs, screen
    alpha_c = 1.0 / (1.0 + cfg.gamma_c * lam)
    alpha_r = 1.0 / (1.0 + cfg.gamma_r * lam)

    has_region = region.any(axis=-1)
    shrunk = np.where(region, alpha_c[..., None] * logits, -np.inf)
    shrunk = np.where(has_region[:, None], shrunk, 0.0)
    shrunk -= shrunk.max(axis=-1, keepdims=True)
    w = np.exp(shrunk)
    q = w / w.sum(axis=-1, keepdims=True)
    t = _tick(timing, "smooth", t)

    m = np.where(region, probs, 0.0).sum(axis=-1)
    has_rest = np.any((~region) & (probs > 0), axis=-1)
    rho = np.where(has_rest, 1.0 - alpha_r * (1.0 - m), 1.0)
    rewritten = np.where(region, rho[..., None] * q, alpha_r[..., None] * probs)
    out = np.where(active[..., None], rewritten, probs)
    _tick(timing, "writeback", t)
    return out, screen


@dataclass
class DefendedOutput:
    attention_out: AttentionTensor
    report: ScreeningReport | None
    hidden: np.ndarray | None = None
    timing: dict[str, int] = field(default_factory=dict)

    def save(self, tensor_path: str | os.PathLike, report_path: str | os.PathLike | None = None,
             timing_path: str | os.PathLike | None = None, run: int = 0) -> None:
        save_tensor(self.attention_out, tensor_path)
        if report_path is not None and self.report is not None:
            Path(report_path).write_text(self.report.to_json() + "\n", encoding="utf-8")
        if timing_path is not None:
            write_timing_csv(timing_path, [self.timing], start_run=run)


def write_timing_csv(path: str | os.PathLike, runs: list[dict[str, int]], start_run: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "run", "nanoseconds"])
        for offset, timing in enumerate(runs):
            for stage in sorted(timing):
                writer.writerow([stage, start_run + offset, timing[stage]])


def logits_from_probabilities(probs: AttentionTensor, epsilon: float = 1e-10) -> AttentionTensor:
    """Rebuild logits as ``log(p + eps)``; softmax ignores the lost constant."""
    logits = np.log(probs.data + epsilon)
    if probs.causal:
        logits = apply_causal_sentinel(logits)
    return AttentionTensor(logits, kind=TensorKind.LOGITS, causal=probs.causal)


def tigs_transform(
    logits: AttentionTensor,
    mask: ContentMask,
    cfg: TigsConfig,
    instrument: Instrumentation | None = None,
) -> DefendedOutput:
    if logits.kind is not TensorKind.LOGITS:
        raise ValueError("tigs_transform expects a logit tensor; see logits_from_probabilities")
    if len(mask) != logits.n_keys:
        raise ShapeError(f"mask length {len(mask)} does not match key extent {logits.n_keys}")
    region = screening_region(mask, logits.n_queries, logits.causal, cfg)
    eligible = eligible_rows(cfg, logits.n_queries)
    timing: dict[str, int] = {}
    outs, screens = [], []
    for layer in range(logits.n_layers):
        out, screen = defend_layer(
            logits.data[layer],
            region,
            cfg,
            layer=layer,
            defended=cfg.defends(layer),
            eligible=eligible,
            instrument=instrument,
            timing=timing,
        )
        outs.append(out)
        screens.append(screen)
    attention = AttentionTensor(np.stack(outs), kind=TensorKind.PROBABILITIES, causal=logits.causal)
    report = ScreeningReport.from_layers(screens, cfg.to_dict())
    return DefendedOutput(attention, report, None, timing)


# --------------------------------------------------------------------------
# Toy transformer


@dataclass
class ToyModel:
    """Seeded multi-head transformer with uniform(-0.1, 0.1) weights."""

    w_q: np.ndarray  # [L, H, d_model, d_head]
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # [L, d_model, d_model]
    w_1: np.ndarray  # [L, d_model, d_ff]
    b_1: np.ndarray  # [L, d_ff]
    w_2: np.ndarray  # [L, d_ff, d_model]
    b_2: np.ndarray  # [L, d_model]
    seed: int
    causal: bool = True

    @classmethod
    def init(
        cls,
        seed: int = 0,
        n_layers: int = 4,
        n_heads: int = 8,
        d_head: int = 8,
        d_ff: int | None = None,
        scale: float = 0.1,
        causal: bool = True,
    ) -> "ToyModel":
        d_model = n_heads * d_head
        d_ff = d_ff or 4 * d_model
        rng = np.random.default_rng(seed)
        u = lambda *shape: rng.uniform(-scale, scale, size=shape)  # noqa: E731
        return cls(
            w_q=u(n_layers, n_heads, d_model, d_head),
            w_k=u(n_layers, n_heads, d_model, d_head),
            w_v=u(n_layers, n_heads, d_model, d_head),
            w_o=u(n_layers, d_model, d_model),
            w_1=u(n_layers, d_model, d_ff),
            b_1=u(n_layers, d_ff),
            w_2=u(n_layers, d_ff, d_model),
            b_2=u(n_layers, d_model),
            seed=seed,
            causal=causal,
        )

    @property
    def n_layers(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[2]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[3]

    def copy(self) -> "ToyModel":
        return ToyModel(
            **{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        )

    def make_inputs(self, n_tokens: int, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed + 1 if seed is None else seed)
        return rng.standard_normal((n_tokens, self.d_model))

    def attention_logits(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Scaled dot-product logits ``[H, N, N]`` for layer input ``x``."""
        q = np.einsum("nd,hde->hne", x, self.w_q[layer])
        k = np.einsum("nd,hde->hne", x, self.w_k[layer])
        s = q @ k.transpose(0, 2, 1) / np.sqrt(self.d_head)
        return apply_causal_sentinel(s) if self.causal else s

    def layer_output(self, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        v = np.einsum("nd,hde->hne", x, self.w_v[layer])
        o = attn @ v  # [H, N, d_head]
        concat = o.transpose(1, 0, 2).reshape(x.shape[0], -1)
        y = concat @ self.w_o[layer]
        hidden = np.maximum(y @ self.w_1[layer] + self.b_1[layer], 0.0)
        return hidden @ self.w_2[layer] + self.b_2[layer] + x

    def layer_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Undefended input to every layer, ``[X0, X1, ..., X_{L-1}]``."""
        inputs = [x]
        for layer in range(self.n_layers - 1):
            attn = attention_softmax(self.attention_logits(layer, inputs[-1]), layer, None)
            inputs.append(self.layer_output(layer, inputs[-1], attn))
        return inputs


def toy_forward(
    model: ToyModel,
    input_embeddings: np.ndarray,
    mask: ContentMask,
    cfg: TigsConfig,
    defended: bool = True,
    instrument: Instrumentation | None = None,
) -> DefendedOutput:
    x = np.asarray(input_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_model:
        raise ShapeError(f"inputs must be [N, {model.d_model}], got {x.shape}")
    n = x.shape[0]
    if len(mask) != n:
        raise ShapeError(f"mask length {len(mask)} does not match {n} tokens")
    region = screening_region(mask, n, model.causal, cfg)
    eligible = eligible_rows(cfg, n)
    timing: dict[str, int] = {}
    attns, screens = [], []
    for layer in range(model.n_layers):
        t = time.perf_counter_ns()
        logits = model.attention_logits(layer, x)
        if defended:
            attn, screen = defend_layer(
                logits, region, cfg,
                layer=layer, defended=cfg.defends(layer), eligible=eligible,
                instrument=instrument, timing=timing,
            )
            screens.append(screen)
        else:
            attn = attention_softmax(logits, layer, instrument)
            _tick(timing, "softmax", t)
        t = time.perf_counter_ns()
        x_next = model.layer_output(layer, x, attn)
        _tick(timing, "layer_out", t)
        attns.append(attn)
        x = x_next
    attention = AttentionTensor(np.stack(attns), kind=TensorKind.PROBABILITIES, causal=model.causal)
    report = ScreeningReport.from_layers(screens, cfg.to_dict()) if defended else None
    return DefendedOutput(attention, report, x, timing)


# --------------------------------------------------------------------------
# Microbenchmark


@dataclass
class ArmStats:
    samples_ns: list[int]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples_ns)

    @property
    def median(self) -> float:
        return float(statistics.median(self.samples_ns))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples_ns, 95))

    def summary(self) -> dict[str, float]:
        return {"n": len(self.samples_ns), "mean_ns": self.mean, "median_ns": self.median, "p95_ns": self.p95}


@dataclass
class BenchSummary:
    defended: ArmStats
    undefended: ArmStats
    warmup: int

    @property
    def overhead_pct(self) -> float:
        return 100.0 * (self.defended.mean / self.undefended.mean - 1.0)

    def to_dict(self) -> dict:
        return {
            "warmup": self.warmup,
            "defended": self.defended.summary(),
            "undefended": self.undefended.summary(),
            "overhead_pct": self.overhead_pct,
        }


def bench(
    model: ToyModel,
    cfg: TigsConfig,
    repeats: int = 100,
    warmup: int = 10,
    n_tokens: int = 32,
    mask: ContentMask | None = None,
    seed: int = 0,
) -> BenchSummary:
    """Time defended vs undefended ``toy_forward``; warmup runs are discarded."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x = model.make_inputs(n_tokens, seed)
    mask = mask or ContentMask(np.arange(n_tokens) > 0)
    arms: dict[bool, list[int]] = {True: [], False: []}
    for _ in range(warmup):
        for flag in (False, True):
            toy_forward(model, x, mask, cfg, defended=flag)
    for _ in range(repeats):
        for flag in (False, True):
            t0 = time.perf_counter_ns()
            toy_forward(model, x, mask, cfg, defended=flag)
            arms[flag].append(time.perf_counter_ns() - t0)
    return BenchSummary(ArmStats(arms[True]), ArmStats(arms[False]), warmup)

