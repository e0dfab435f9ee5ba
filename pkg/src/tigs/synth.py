"""Synthetic trigger-collapse instances.

Suites are built directly in logit space. Token 0 is always a structural
placeholder (BOS); positions ``1..N-1`` are content. A triggered head gives
the trigger token a logit exactly ``delta`` above every other key in each
row; a benign head is near-uniform over content and, with
``structural_sink``, parks most of its mass on token 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError, MaskError
from .pipeline import ToyModel, attention_softmax
from .tensor_io import AttentionTensor, ContentMask, TensorKind, apply_causal_sentinel


@dataclass(frozen=True)
class SynthSpec:
    seq_len: int = 16
    delta: float = 8.0
    trigger_index: int = 5
    noise_scale: float = 0.0
    n_collapsed_heads: int = 1
    structural_sink: bool = False
    seed: int = 0
    sink_advantage: float = 8.0
    n_heads: int = 8
    trigger_layer: int = 0
    causal: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.trigger_index < self.seq_len:
            raise ValueError("trigger_index must lie in [0, seq_len)")
        if self.delta < 0 or self.noise_scale < 0:
            raise ValueError("delta and noise_scale must be non-negative")


class SynthSuite(NamedTuple):
    tensor: AttentionTensor
    mask: ContentMask
    labels: dict


def make_collapsed_row(spec: SynthSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits with ``s[T] - max_{j != T} s[j] == delta``.

    Non-trigger logits are uniform on ``[-noise_scale, 0]``.
    """
    n = spec.seq_len
    if n < 2:
        raise ValueError("a collapsed row needs at least two positions")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    s = -rng.uniform(0.0, spec.noise_scale, size=n) if spec.noise_scale > 0 else np.zeros(n)
    others = np.delete(s, spec.trigger_index)
    s[spec.trigger_index] = others.max() + spec.delta
    return s


def trigger_gap(logits: Sequence[float], trigger_index: int) -> float:
    s = np.asarray(logits, dtype=np.float64)
    return float(s[trigger_index] - np.delete(s, trigger_index).max())


def entropy_bound(n: int, delta: float) -> float:
    """Upper bound ``(n - 1) e^{-delta} (delta + 1)`` on a dominated row's entropy."""
    if n < 2:
        raise DomainError("bound needs n >= 2")
    if delta < 1:
        raise DomainError("bound holds only in the trigger-dominant regime delta >= 1")
    return (n - 1) * math.exp(-delta) * (delta + 1.0)


def dispersion_penalty(collapse_scores: Sequence[float], epsilon: float = 1e-10) -> float:
    """Peak-to-mean ratio of per-head collapse scores."""
    c = np.asarray(collapse_scores, dtype=np.float64)
    if c.size == 0:
        raise ValueError("need at least one head")
    return float(c.max() / (c.mean() + epsilon))


def suite_mask(seq_len: int) -> ContentMask:
    tokens = ["<s>"] + [f"tok{j}" for j in range(1, seq_len)]
    return ContentMask(np.arange(seq_len) > 0, tuple(tokens))


def _place_heads(n_heads: int, count: int, seed: int) -> list[int]:
    if not 0 <= count <= n_heads:
        raise ValueError(f"cannot place {count} triggered heads among {n_heads}")
    order = np.random.default_rng([seed, 7919]).permutation(n_heads)
    return sorted(int(h) for h in order[:count])


def _build_suite(head_gaps: dict[int, float], spec: SynthSpec, layers: int, n_heads: int) -> SynthSuite:
    n = spec.seq_len
    mask = suite_mask(n)
    if not mask.mask[spec.trigger_index]:
        raise MaskError(f"trigger index {spec.trigger_index} is not a content position")
    if not 0 <= spec.trigger_layer < layers:
        raise ValueError("trigger_layer out of range")
    content = np.flatnonzero(mask.mask)
    t_local = int(np.searchsorted(content, spec.trigger_index))
    rng = np.random.default_rng(spec.seed)
    logits = np.zeros((layers, n_heads, n, n))
    for l in range(layers):
        for h in range(n_heads):
            gap = head_gaps.get(h) if l == spec.trigger_layer else None
            for i in range(n):
                row = np.empty(n)
                if gap is not None:
                    row_spec = replace(spec, seq_len=content.size, trigger_index=t_local, delta=gap)
                    row[content] = make_collapsed_row(row_spec, rng)
                    row[0] = 0.0
                else:
                    row[content] = -rng.uniform(0.0, spec.noise_scale, size=content.size)
                    row[0] = spec.sink_advantage if spec.structural_sink else 0.0
                logits[l, h, i] = row
    if spec.causal:
        logits = apply_causal_sentinel(logits)
    tensor = AttentionTensor(logits, kind=TensorKind.LOGITS, causal=spec.causal)
    labels = {
        "triggered": [[spec.trigger_layer, h] for h in sorted(head_gaps)],
        "gaps": {str(h): head_gaps[h] for h in sorted(head_gaps)},
        "trigger_index": spec.trigger_index,
        "n_layers": layers,
        "n_heads": n_heads,
        "seed": spec.seed,
    }
    return SynthSuite(tensor, mask, labels)


def make_attention_suite(benign_heads: int, triggered_heads: int, spec: SynthSpec, layers: int = 1) -> SynthSuite:
    """Tensor of ``layers`` x ``benign + triggered`` heads.

    Triggered heads all sit in ``spec.trigger_layer``; every other layer is benign.
    """
    if benign_heads < 0 or triggered_heads < 0 or benign_heads + triggered_heads < 1 or layers < 1:
        raise ValueError("suite needs at least one head and one layer")
    n_heads = benign_heads + triggered_heads
    heads = _place_heads(n_heads, triggered_heads, spec.seed)
    return _build_suite({h: spec.delta for h in heads}, spec, layers, n_heads)


def make_distributed_suite(total_gap: float, heads: int, spec: SynthSpec, layers: int = 1) -> SynthSuite:
    """Spread a total dominance budget evenly over ``heads`` of ``spec.n_heads`` heads."""
    if heads < 1 or heads > spec.n_heads:
        raise ValueError("heads must lie in [1, n_heads]")
    placed = _place_heads(spec.n_heads, heads, spec.seed)
    share = total_gap / heads
    return _build_suite({h: share for h in placed}, spec, layers, spec.n_heads)


def implant_trigger_weights(
    model: ToyModel,
    layer: int,
    head: int,
    trigger_index: int,
    delta: float,
    reference_inputs: np.ndarray | None = None,
    n_tokens: int = 32,
) -> ToyModel:
    """Rig one head so the trigger key out-scores every other visible key by ``delta``.

    The guarantee holds on ``reference_inputs`` (by default
    ``model.make_inputs(n_tokens)``) propagated through the undefended
    earlier layers. A fixed direction ``e`` is projected out of every key,
    all queries are shifted along ``e`` so their ``e``-component is at least
    1, and the trigger key alone gets a component ``b`` along ``e``. Both
    edits are minimum-norm weight changes, which need the layer input to have
    full row rank. Other heads are not touched.
    """
    if not (0 <= layer < model.n_layers and 0 <= head < model.n_heads):
        raise ValueError("layer/head out of range")
    out = model.copy()
    if delta == 0:
        return out
    x0 = model.make_inputs(n_tokens) if reference_inputs is None else np.asarray(reference_inputs, dtype=np.float64)
    n = x0.shape[0]
    if not 0 <= trigger_index < n:
        raise ValueError("trigger_index out of range")
    x = model.layer_inputs(x0)[layer]
    if np.linalg.matrix_rank(x) < n:
        raise ValueError("layer input is rank deficient; cannot implant exactly")
    x_pinv = np.linalg.pinv(x)

    d_head = model.d_head
    e = np.ones(d_head) / math.sqrt(d_head)
    q = x @ model.w_q[layer, head]
    k = x @ model.w_k[layer, head]
    shift = max(0.0, -float((q @ e).min())) + 1.0
    q_new = q + shift * e[None, :]
    k_perp = k - np.outer(k @ e, e)

    rows = np.arange(trigger_index, n) if model.causal else np.arange(n)
    scale = math.sqrt(d_head)
    coeff = q_new[rows] @ e  # >= 1 by construction
    base = q_new[rows] @ k_perp.T
    need = np.empty(rows.size)
    for r, i in enumerate(rows):
        visible = np.arange(i + 1) if model.causal else np.arange(n)
        others = visible[visible != trigger_index]
        runner_up = base[r, others].max() if others.size else -np.inf
        need[r] = (delta * scale + runner_up - base[r, trigger_index]) / coeff[r]
    b = float(need.max())
    if not math.isfinite(b):
        b = 0.0
    b = b + 1e-9 * max(1.0, abs(b))
    k_new = k_perp.copy()
    k_new[trigger_index] += b * e
    if not np.all(np.isfinite(k_new)) or abs(b) > 1e150:
        raise ValueError("requested gap is beyond numeric range")

    out.w_q[layer, head] = model.w_q[layer, head] + x_pinv @ (q_new - q)
    out.w_k[layer, head] = model.w_k[layer, head] + x_pinv @ (k_new - k)
    return out


def realized_gap(model: ToyModel, layer: int, head: int, trigger_index: int, reference_inputs: np.ndarray) -> float:
    """Smallest trigger-over-runner-up logit gap across rows that can see the trigger."""
    x = model.layer_inputs(reference_inputs)[layer]
    s = model.attention_logits(layer, x)[head]
    n = s.shape[0]
    gaps = []
    for i in range(trigger_index if model.causal else 0, n):
        visible = np.arange(i + 1) if model.causal else np.arange(n)
        others = visible[visible != trigger_index]
        if others.size:
            gaps.append(s[i, trigger_index] - s[i, others].max())
    return float(min(gaps))


def softmax_entropy(logits: np.ndarray) -> float:
    p = attention_softmax(np.asarray(logits, dtype=np.float64), 0, None)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))
