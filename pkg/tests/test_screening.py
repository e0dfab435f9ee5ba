import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tigs.config import TigsConfig
from tigs.errors import EmptyHeadError, EmptyRegionError, ShapeError
from tigs.screening import (
    ScreeningReport,
    collapse_score,
    content_entropy,
    content_renormalize,
    head_gate,
    layer_zscores,
    row_gate,
    screen_layer,
    screen_tensor,
    smoothing_strength,
    tail_risk,
)
from tigs.smoothing import softmax
from tigs.tensor_io import AttentionTensor, ContentMask, TensorKind, content_region

CFG = TigsConfig()


def test_renormalize_examples():
    np.testing.assert_allclose(content_renormalize([0.25] * 4, [1, 3]), [0.5, 0.5], atol=1e-9)
    np.testing.assert_allclose(content_renormalize([0.5, 0.3, 0.2], [0, 2]), [0.5 / 0.7, 0.2 / 0.7], atol=1e-9)
    row = np.array([0.1, 0.6, 0.3])
    np.testing.assert_allclose(content_renormalize(row, [0, 1, 2]), row, atol=1e-9)
    with pytest.raises(EmptyRegionError):
        content_renormalize(row, [])


def test_entropy_examples():
    assert content_entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-6)
    assert abs(content_entropy(np.array([1.0, 0, 0, 0]), 1e-10)) < 1e-8
    # oracle: -sum p log p evaluated at 30 digits
    assert content_entropy(np.array([0.7, 0.2, 0.1])) == pytest.approx(0.8018185525433373, abs=1e-5)


def test_collapse_examples():
    assert collapse_score(math.log(4), 4) == pytest.approx(0.0, abs=1e-12)
    assert collapse_score(content_entropy(np.array([1.0, 0, 0, 0])), 4) == pytest.approx(math.log(4), abs=1e-8)
    assert collapse_score(-1e-9, 1) == 0.0
    assert collapse_score(0.0, 0) == 0.0


def test_tail_risk_examples():
    assert tail_risk([0.1, 2.0, 0.5, 1.5, 0.3], 2) == pytest.approx(1.75)
    assert tail_risk([0.7, 0.7, 0.7], 2) == pytest.approx(0.7)
    assert tail_risk([3.0], 5) == 3.0
    with pytest.raises(EmptyHeadError):
        tail_risk([], 3)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.integers(1, 40))
def test_tail_risk_dominates_mean(scores, k):
    k = min(k, len(scores))
    assert tail_risk(scores, k) >= np.mean(scores) - 1e-12


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.integers(1, 10), st.randoms())
def test_tail_risk_order_independent(scores, k, rnd):
    shuffled = scores[:]
    rnd.shuffle(shuffled)
    assert tail_risk(scores, k) == pytest.approx(tail_risk(shuffled, k), abs=1e-12)


def test_zscore_examples():
    np.testing.assert_allclose(layer_zscores([1, 1, 1, 1]), 0.0)
    np.testing.assert_allclose(layer_zscores([0, 2]), [-1, 1], atol=1e-9)
    np.testing.assert_allclose(layer_zscores([5.0]), [0.0])


def test_gate_examples():
    assert head_gate(1e6, 1e6, CFG) == pytest.approx(1.0)
    assert head_gate(CFG.tau_h, CFG.tau_R, CFG) == pytest.approx(0.75)
    assert head_gate(-1e6, -1e6, CFG) == pytest.approx(0.0, abs=1e-12)
    assert row_gate(CFG.tau_c, CFG) == pytest.approx(0.5)
    assert row_gate(CFG.tau_c + 10 / CFG.eta_c, CFG) == pytest.approx(0.9999546021312976, abs=1e-9)
    assert row_gate(-1e6, CFG) == pytest.approx(0.0)


def test_strength_examples():
    assert smoothing_strength(1.0, 1.0, 8.0) == 8.0
    assert smoothing_strength(0.3, 0.9, 0.0) == 0.0
    assert smoothing_strength(0.75, 0.5, 8.0) == pytest.approx(3.0)


@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
)
def test_lambda_monotone_in_signals(c1, c2, z1, z2, r1, r2):
    (c1, c2), (z1, z2), (r1, r2) = sorted((c1, c2)), sorted((z1, z2)), sorted((r1, r2))
    lam = lambda c, z, r: smoothing_strength(head_gate(z, r, CFG), row_gate(c, CFG), CFG.beta)  # noqa: E731
    assert lam(c1, z1, r1) <= lam(c2, z1, r1) + 1e-12
    assert lam(c1, z1, r1) <= lam(c1, z2, r1) + 1e-12
    assert lam(c1, z1, r1) <= lam(c1, z1, r2) + 1e-12
    assert 0.0 <= lam(c2, z2, r2) <= CFG.beta


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_gates_inside_unit_interval(z, c):
    # Open interval in exact arithmetic; double-precision logistics saturate.
    assert 0.0 <= head_gate(z, z, CFG) <= 1.0
    assert 0.0 <= row_gate(c, CFG) <= 1.0
    if abs(z) < 4 and abs(c) < 4:
        assert 0.0 < head_gate(z, z, CFG) < 1.0
        assert 0.0 < row_gate(c, CFG) < 1.0


def _loop_reference(probs, mask, causal, cfg):
    """Row-by-row recomputation with the scalar functions."""
    n_heads, n_rows, _ = probs.shape
    collapse = np.zeros((n_heads, n_rows))
    for h in range(n_heads):
        for i in range(n_rows):
            region = content_region(mask, i, causal)
            if region.size == 0:
                continue
            p = content_renormalize(probs[h, i], region, cfg.epsilon)
            collapse[h, i] = collapse_score(content_entropy(p, cfg.epsilon), region.size)
    scoreable = [i for i in range(n_rows) if content_region(mask, i, causal).size]
    risks = [tail_risk(collapse[h, scoreable], cfg.k) for h in range(n_heads)]
    z = layer_zscores(risks, cfg.epsilon)
    lam = np.zeros_like(collapse)
    for h in range(n_heads):
        for i in scoreable:
            lam[h, i] = smoothing_strength(head_gate(z[h], risks[h], cfg), row_gate(collapse[h, i], cfg), cfg.beta)
    return collapse, np.array(risks), z, lam


@pytest.mark.parametrize("causal", [False, True])
def test_vectorized_layer_matches_scalar_path(rng, causal):
    n = 9
    logits = rng.normal(scale=2.0, size=(5, n, n))
    if causal:
        logits[:, np.arange(n)[None, :] > np.arange(n)[:, None]] = -np.inf
    probs = softmax(logits)
    mask = ContentMask(rng.random(n) > 0.3)
    region = np.array([np.isin(np.arange(n), content_region(mask, i, causal)) for i in range(n)])
    got = screen_layer(probs, region, CFG)
    collapse, risks, z, lam = _loop_reference(probs, mask, causal, CFG)
    np.testing.assert_allclose(got.collapse, collapse, atol=1e-12)
    np.testing.assert_allclose(got.tail_risk, risks, atol=1e-12)
    np.testing.assert_allclose(got.zscore, z, atol=1e-9)
    np.testing.assert_allclose(got.lam, lam, atol=1e-12)


def _uniform(L=1, H=4, n=8):
    return AttentionTensor(np.full((L, H, n, n), 1.0 / n), kind=TensorKind.PROBABILITIES)


def test_uniform_attention_quiet():
    mask = ContentMask([False] + [True] * 7)
    rep = screen_tensor(_uniform(), mask, CFG)
    np.testing.assert_allclose(rep.collapse, 0.0, atol=1e-8)
    bound = CFG.beta * head_gate(0.0, 0.0, CFG) * row_gate(0.0, CFG)
    assert rep.lam.max() <= bound * (1 + 1e-6)
    assert rep.lam.max() < 1e-3


def test_one_hot_row_has_max_lambda():
    n = 8
    probs = np.full((1, 4, n, n), 1.0 / n)
    probs[0, 2, 3] = np.eye(n)[5]
    rep = screen_tensor(AttentionTensor(probs, kind=TensorKind.PROBABILITIES), ContentMask.all_content(n), CFG)
    head = rep.lam[0, 2]
    assert np.argmax(head) == 3
    assert np.all(np.delete(head, 3) < head[3])


def test_noncontent_permutation_invariance(rng):
    n = 10
    mask = ContentMask(np.array([0, 1, 1, 0, 1, 0, 1, 1, 0, 1], dtype=bool))
    probs = softmax(rng.normal(size=(1, 3, n, n)))
    nc = np.flatnonzero(~mask.mask)
    shuffled = probs.copy()
    shuffled[..., nc] = shuffled[..., rng.permutation(nc)]
    a = screen_tensor(AttentionTensor(probs, kind=TensorKind.PROBABILITIES), mask, CFG)
    b = screen_tensor(AttentionTensor(shuffled, kind=TensorKind.PROBABILITIES), mask, CFG)
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-12)
    np.testing.assert_allclose(a.collapse, b.collapse, atol=1e-12)


def test_shift_invariance_of_content_logits(rng):
    n = 7
    mask = ContentMask([False, True, True, True, False, True, True])
    logits = rng.normal(size=(2, n, n))
    shifted = logits.copy()
    shifted[..., mask.mask] += 3.7
    region = np.broadcast_to(mask.mask, (n, n))
    a = screen_layer(softmax(logits), region, CFG)
    b = screen_layer(softmax(shifted), region, CFG)
    np.testing.assert_allclose(a.collapse, b.collapse, atol=1e-9)
    np.testing.assert_allclose(a.entropy, b.entropy, atol=1e-9)


def test_degenerate_regions():
    n = 4
    probs = np.full((1, 2, n, n), 0.25)
    mask = ContentMask([False, True, False, False])
    rep = screen_tensor(AttentionTensor(probs, kind=TensorKind.PROBABILITIES, causal=False), mask, CFG)
    # Single-token region: collapse defined as 0, gate at its minimum-collapse value.
    np.testing.assert_array_equal(rep.collapse, 0.0)
    np.testing.assert_allclose(rep.row_gate, row_gate(0.0, CFG))


def test_head_without_rows_excluded():
    n = 3
    probs = np.zeros((1, 2, n, n))
    probs[..., 0] = 1.0
    mask = ContentMask([False, True, True])
    causal = AttentionTensor(np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None] * np.ones((1, 2, 1, 1)),
                             kind=TensorKind.PROBABILITIES, causal=True)
    rep = screen_tensor(causal, mask, CFG)
    assert rep.lam[0, :, 0].tolist() == [0.0, 0.0]  # row 0 sees only BOS
    all_struct = screen_tensor(AttentionTensor(probs, kind=TensorKind.PROBABILITIES), ContentMask([False] * 3), CFG)
    assert not all_struct.scoreable.any()
    assert np.all(all_struct.lam == 0)
    assert np.all(np.isneginf(all_struct.zscore))
    expected = 1.0 - 1.0 / (1.0 + math.exp(-CFG.eta_R * CFG.tau_R))
    np.testing.assert_allclose(all_struct.head_gate, expected)


def test_layer_barrier_shift(rng):
    """Changing one head's tail risk moves every other head's z-score."""
    n = 8
    probs = softmax(rng.normal(size=(4, n, n)))
    region = np.ones((n, n), dtype=bool)
    before = screen_layer(probs, region, CFG)
    spiked = probs.copy()
    spiked[0] = np.eye(n)[2]
    after = screen_layer(spiked, region, CFG)
    assert np.all(np.abs(after.zscore[1:] - before.zscore[1:]) > 1e-6)
    np.testing.assert_allclose(after.tail_risk[1:], before.tail_risk[1:])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        screen_tensor(_uniform(n=8), ContentMask.all_content(7), CFG)


def test_report_json_roundtrip():
    n = 6
    probs = np.full((2, 3, n, n), 1.0 / n)
    probs[1, 1, 2] = np.eye(n)[3]
    rep = screen_tensor(AttentionTensor(probs, kind=TensorKind.PROBABILITIES), ContentMask([False] + [True] * 5), CFG)
    back = ScreeningReport.from_json(rep.to_json())
    np.testing.assert_array_equal(back.lam, rep.lam)
    np.testing.assert_array_equal(back.tail_risk, rep.tail_risk)
    np.testing.assert_array_equal(back.content_size, rep.content_size)
    d = rep.to_dict()
    assert set(d["layers"][0]) >= {"mu", "sigma", "heads"}
    assert set(d["layers"][0]["heads"][0]) >= {"R", "Z", "g_head", "rows"}
    assert set(d["layers"][0]["heads"][0]["rows"][0]) >= {"C", "H", "g_row", "lambda"}
    assert rep.head(1, 1).rows[2].collapse == pytest.approx(math.log(5), abs=1e-8)
