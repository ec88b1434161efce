import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alibi_surgeon.diagnostics import (
    DiagnosisReport,
    HeadClass,
    HeadMetrics,
    Thresholds,
    attn_entropy,
    bos_mass,
    classify,
    column_drift,
    column_trend,
    detect_band,
    diagnose,
    drift,
    outside_columns,
    report_from_snapshot,
    slope_ordering,
    threshold_robustness,
)
from alibi_surgeon.model import ModelConfig, init_model


def uniform_causal(T):
    A = np.tril(np.ones((T, T)))
    return A / A.sum(1, keepdims=True)


def random_attention(rng, T):
    z = rng.normal(size=(T, T)) * 2
    z[np.triu_indices(T, 1)] = -np.inf
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def brute_bos(A):
    return sum(A[t][0] for t in range(len(A))) / len(A)


def brute_entropy(A):
    total = 0.0
    for row in A:
        for p in row:
            if p > 0:
                total -= p * math.log(p)
    return total / len(A)


def test_closed_form_fixtures():
    A = uniform_causal(4)
    assert bos_mass(A) == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4, abs=1e-12)
    assert bos_mass(A) == pytest.approx(0.5208, abs=1e-4)
    assert attn_entropy(A) == pytest.approx((math.log(2) + math.log(3) + math.log(4)) / 4, abs=1e-12)
    assert attn_entropy(A) == pytest.approx(0.7945, abs=1e-4)


def test_simple_fixtures():
    fixed = np.zeros((6, 6))
    fixed[:, 0] = 1
    assert bos_mass(fixed) == 1.0
    assert attn_entropy(fixed) == 0.0
    assert bos_mass(np.eye(8)) == pytest.approx(1 / 8)
    assert attn_entropy(np.full((4, 4), 0.25)) == pytest.approx(math.log(4))


def test_metrics_match_brute_force_on_random_snapshots():
    rng = np.random.default_rng(0)
    for _ in range(30):
        T = int(rng.integers(2, 20))
        A = random_attention(rng, T)
        assert abs(bos_mass(A) - brute_bos(A)) < 1e-6
        assert abs(attn_entropy(A) - brute_entropy(A)) < 1e-6
        assert 0 <= bos_mass(A) <= 1
        assert 0 <= attn_entropy(A) <= math.log(T) + 1e-12


def test_unnormalized_rows_rejected():
    with pytest.raises(ValueError):
        bos_mass(np.full((3, 3), 0.5))


@pytest.mark.parametrize("bos,ent,expect", [
    (0.538, 1.0, HeadClass.BOS_SINK),
    (0.97, 0.0, HeadClass.DEAD),
    (0.166, 2.0, HeadClass.HEALTHY),
    (0.50, 2.0, HeadClass.HEALTHY),
    (0.95, 0.1, HeadClass.BOS_SINK),
    (0.30, 0.2, HeadClass.LOW_ENTROPY),
])
def test_classify(bos, ent, expect):
    assert classify(HeadMetrics(bos, ent)) is expect


SEVERITY = {HeadClass.HEALTHY: 0, HeadClass.LOW_ENTROPY: 1, HeadClass.BOS_SINK: 2, HeadClass.DEAD: 3}


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 3))
def test_classify_monotone_in_bos_mass(b1, b2, ent):
    lo, hi = sorted((b1, b2))
    assert SEVERITY[classify(HeadMetrics(hi, ent))] >= SEVERITY[classify(HeadMetrics(lo, ent))]


def test_thresholds_validate():
    with pytest.raises(ValueError):
        Thresholds(healthy_max=0.96, dead_min=0.95)


def grid_report(bos, entropy=None, **kw):
    bos = np.asarray(bos, dtype=float)
    return DiagnosisReport(bos, np.full(bos.shape, 2.0) if entropy is None else entropy, **kw)


def test_robustness_bimodal_and_boundary():
    rng = np.random.default_rng(0)
    assert threshold_robustness(rng.choice([0.05, 0.9], size=(6, 8))) == 1.0
    # 0.5 is collapsed at 0.40 but healthy at 0.50 and 0.60
    assert threshold_robustness(np.full((2, 2), 0.5)) == 0.0
    assert threshold_robustness(np.array([0.1, 0.45, 0.55, 0.8])) == 0.5


def test_band_detection():
    sick = np.zeros((6, 8))
    sick[:, 5:8] = 0.9
    assert detect_band(grid_report(sick)) == (5, 7)
    assert detect_band(grid_report(np.zeros((6, 8)))) is None
    # a single isolated sick head still scores 1 - 0.5 > 0
    one = np.zeros((6, 8))
    one[2, 3] = 0.8
    assert detect_band(grid_report(one)) == (3, 3)


@given(st.integers(0, 7))
def test_band_recovers_right_aligned_columns(a):
    sick = np.zeros((4, 8), dtype=bool)
    sick[:, a:] = True
    assert detect_band(sick) == (a, 7)


def test_band_ties_prefer_higher_indices():
    sick = np.zeros((2, 8), dtype=bool)
    sick[:, 1] = True
    sick[:, 6] = True
    assert detect_band(sick) == (6, 6)


def test_report_counts_and_json_roundtrip():
    rng = np.random.default_rng(3)
    rep = grid_report(rng.uniform(size=(4, 8)), rng.uniform(0, 2, size=(4, 8)), prompt_sha="abc", checkpoint_id="c1")
    assert sum(rep.counts().values()) == 32
    doc = json.loads(json.dumps(rep.to_json()))
    assert set(doc) == {"checkpoint_id", "prompt_sha", "thresholds", "grid", "counts", "band"}
    assert set(doc["grid"][0][0]) == {"bos", "entropy", "class"}
    back = DiagnosisReport.from_json(doc)
    np.testing.assert_array_equal(back.bos, rep.bos)
    assert back.classes == rep.classes


def test_diagnose_totality_and_determinism(tiny_model):
    w = tiny_model.copy()
    for l in range(2):
        w.layer(l, "attn_out.weight").data[:] = 0
    prompt = list(range(40, 60))
    r1 = diagnose(w, prompt)
    r2 = diagnose(w, prompt)
    assert sum(r1.counts().values()) == 8
    assert r1.bos.tobytes() == r2.bos.tobytes()
    with pytest.raises(ValueError):
        diagnose(w, prompt[:15])


def test_one_hot_bos_model_is_all_dead():
    cfg = ModelConfig(n_layers=1, n_heads=4, d_model=16, max_seq_len=32)
    w = init_model(cfg, 0)
    # BOS gets a private embedding feature; every key reads it and every query is constant
    w["embed"].data[:] = 0
    w["embed"].data[256, 1] = 50.0
    w["layers.0.qkv.weight"].data[:] = 0
    w["layers.0.qkv.weight"].data[1, 16:32] = 40.0
    w["layers.0.qkv.bias"].data[:16] = 1.0
    rep = diagnose(w, [256] + list(range(30, 50)))
    assert rep.counts()["Dead"] == 4


def test_drift_examples():
    stock = grid_report([[0.166, 0.2]])
    post = grid_report([[0.056, 0.2]])
    s = drift(stock, post)
    r = s.records[0]
    assert r.delta == pytest.approx(-0.110, abs=1e-12)
    assert r.drifting
    assert s.count == 1
    assert s.worst_label() == "L0H0: -0.110"
    same = drift(stock, stock)
    assert same.count == 0 and same.mean_abs_zone == 0.0


def test_drift_constructed_zone_means():
    stock = grid_report(np.full((4, 4), 0.1))
    post_bos = stock.bos.copy()
    for l, h in [(0, 0), (1, 1), (2, 0)]:
        post_bos[l, h] += 0.06
    post_bos[3, 3] += 0.444  # outside the zone
    post = grid_report(post_bos)
    zone = outside_columns({2, 3})
    s = drift(stock, post, zone=zone)
    assert s.count == 3
    assert s.zone_size == 8
    assert s.mean_abs_zone == pytest.approx(3 * 0.06 / 8)
    assert s.mean_abs_drifters == pytest.approx(0.06)
    full = drift(stock, post)
    assert full.worst_label() == "L3H3: +0.444"


def test_worst_case_format_matches_table_style():
    stock = grid_report(np.zeros((24, 16)) + 0.1)
    post_bos = stock.bos.copy()
    post_bos[23, 14] += 0.444
    assert drift(stock, grid_report(post_bos)).worst_label() == "L23H14: +0.444"


def test_drift_rejects_mismatch():
    with pytest.raises(ValueError):
        drift(grid_report(np.zeros((2, 2))), grid_report(np.zeros((2, 4))))
    with pytest.raises(ValueError):
        drift(grid_report(np.zeros((2, 2)), prompt_sha="a"), grid_report(np.zeros((2, 2)), prompt_sha="b"))


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.lists(st.floats(0, 1), min_size=6, max_size=6))
def test_drift_is_antisymmetric(a, b):
    ra, rb = grid_report(np.reshape(a, (2, 3))), grid_report(np.reshape(b, (2, 3)))
    fwd, back = drift(ra, rb), drift(rb, ra)
    for x, y in zip(fwd.records, back.records):
        assert x.delta == -y.delta
        assert x.drifting == y.drifting


def test_column_trend_rule():
    assert column_trend([0.083, 0.154]) == "Spreading"
    assert column_trend([0.046, 0.046]) == "Stable"
    assert column_trend([0.034, 0.051]) == "Stable"  # exactly 1.5x is not spreading
    assert column_trend([0.0, 0.0]) == "Stable"


def test_column_drift_trajectory():
    stock = grid_report(np.full((3, 4), 0.1))
    mid, end = stock.bos.copy(), stock.bos.copy()
    mid[:, 3] += 0.083
    end[:, 3] += 0.154
    mid[:, 2] += 0.046
    end[:, 2] += 0.046
    cols = column_drift(stock, [grid_report(mid), grid_report(end)], {(l, h) for l in range(3) for h in (2, 3)})
    by = {c.head: c for c in cols}
    assert by[3].trend == "Spreading" and by[3].means == pytest.approx((0.083, 0.154))
    assert by[2].trend == "Stable"
    assert set(by) == {2, 3}
    flat = column_drift(stock, [stock], {(0, 0)})
    assert flat[0].trend == "Stable" and flat[0].means == (0.0,)


def test_slope_ordering_sign():
    rising = np.tile(np.linspace(0.05, 0.9, 8), (6, 1))
    assert slope_ordering(grid_report(rising)) == pytest.approx(1.0)
    assert slope_ordering(grid_report(rising[:, ::-1])) == pytest.approx(-1.0)


def test_report_from_snapshot_shape():
    rng = np.random.default_rng(2)
    snap = np.stack([np.stack([random_attention(rng, 17) for _ in range(4)]) for _ in range(3)])
    rep = report_from_snapshot(snap)
    assert rep.shape == (3, 4)
    assert rep.bos[1, 2] == pytest.approx(brute_bos(snap[1, 2]), abs=1e-9)
