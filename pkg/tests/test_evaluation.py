import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_classification_map, brute_cmc_map, brute_prec_at_k
from reidgan.evaluation import (
    ALL,
    PID,
    EvalReport,
    MetricError,
    ProtocolError,
    ScoreMatrix,
    aggregate_reports,
    average_precision,
    classification_ap,
    cmc_single_query,
    confusion_matrix,
    evaluate_scores,
    mean_ap_classification,
    prec_at_k,
    write_confusion_csv,
)


def _normalise(x):
    x = np.asarray(x, dtype=float)
    return x / x.sum(axis=1, keepdims=True)


def test_prec_at_1_example():
    m = ScoreMatrix(_normalise([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.5, 0.3, 0.2]]), [0, 1, 2])
    assert prec_at_k(m, 1) == pytest.approx(2 / 3)
    assert prec_at_k(m, 2) == pytest.approx(2 / 3)
    assert prec_at_k(m, 3) == 1.0


def test_ties_break_by_class_index():
    m = ScoreMatrix(np.full((2, 4), 0.25), [0, 1])
    assert prec_at_k(m, 1) == 0.5
    assert prec_at_k(m, 2) == 1.0


def test_average_precision_example():
    assert average_precision([True, False, True]) == pytest.approx(5 / 6)
    assert average_precision([False, True]) == 0.5


def test_classification_ap_excludes_absent_class():
    m = ScoreMatrix(_normalise([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.5, 0.4, 0.1]]), [0, 1, 1])
    aps, excluded = classification_ap(m)
    assert excluded == [2]
    # class 0 ranking by column 0: rows 0 (pos), 2, 1 -> AP 1
    # class 1 ranking by column 1: rows 1 (pos), 2 (pos), 0 -> AP 1
    assert aps == {0: 1.0, 1: 1.0}
    rep = evaluate_scores(m)
    assert any("class 2" in w for w in rep.warnings)


def test_pid_scope_drops_unknown_rows_keeps_columns():
    m = ScoreMatrix(_normalise([[0.1, 0.9], [0.1, 0.9], [0.9, 0.1]]), [0, 1, 1])
    assert prec_at_k(m, 1, ALL) == pytest.approx(1 / 3)
    assert prec_at_k(m, 1, PID) == 0.5
    assert m.in_scope(PID).num_classes == 2
    with pytest.raises(MetricError):
        m.in_scope("everything")


def test_pid_scope_empty():
    m = ScoreMatrix(_normalise([[0.5, 0.5]]), [0])
    with pytest.raises(MetricError):
        prec_at_k(m, 1, PID)
    rep = evaluate_scores(m)
    assert rep.map_pid is None and PID not in rep.prec_at


def test_score_matrix_validation():
    with pytest.raises(MetricError):
        ScoreMatrix(np.ones((2, 3)), [0, 1])
    with pytest.raises(MetricError):
        ScoreMatrix(_normalise(np.ones((2, 3))), [0, 3])
    with pytest.raises(MetricError):
        prec_at_k(ScoreMatrix(_normalise(np.ones((1, 3))), [0]), 4)


def test_cmc_example():
    dist = np.array([[0.1, 0.2, 0.3, 0.4, 0.5]])
    cmc, mAP = cmc_single_query(dist, [1], [2, 3, 1, 1, 4], exclude_same_camera=False)
    assert cmc.tolist() == [0, 0, 1, 1, 1]
    assert mAP == pytest.approx((1 / 3 + 2 / 4) / 2)


def test_cmc_same_camera_exclusion():
    dist = np.array([[0.1, 0.2, 0.3]])
    cmc, _ = cmc_single_query(dist, [1], [1, 2, 1], [0], [0, 1, 1], exclude_same_camera=True)
    # gallery 0 is the same identity in the same camera and is dropped
    assert cmc.tolist() == [0, 1, 1]
    with pytest.raises(ProtocolError):
        cmc_single_query(dist, [1], [1, 2, 2], [0], [0, 1, 1])
    with pytest.raises(ProtocolError):
        cmc_single_query(dist, [1], [1, 2, 2])


def test_confusion_matrix_example():
    m = ScoreMatrix(_normalise([[0.8, 0.1, 0.1], [0.3, 0.6, 0.1], [0.2, 0.7, 0.1]]), [0, 1, 1])
    cm, present = confusion_matrix(m)
    assert cm.tolist() == [[1, 0, 0], [0, 2, 0], [0, 0, 0]]
    assert present.tolist() == [True, True, False]


def test_confusion_csv_marks_absent(tmp_path):
    p = write_confusion_csv([[1, 0], [0, 0]], [True, False], tmp_path / "c.csv")
    assert p.read_text().splitlines()[2] == "1,nan,nan"


def test_report_roundtrip_and_metric(tmp_path):
    m = ScoreMatrix(_normalise([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.5, 0.3, 0.2]]), [0, 1, 2])
    rep = evaluate_scores(m, (1, 2), {"seed": 1})
    rep.cmc, rep.retrieval_map = [0.5, 1.0], 0.75
    back = EvalReport.load(rep.save(tmp_path / "r.json"))
    assert back.to_json() == rep.to_json()
    assert back.metric("ALL prec@1") == pytest.approx(200 / 3)
    assert back.metric("prec@1") == back.metric("ALL prec@1")
    assert back.metric("CMC@1 S-Q") == 50.0 and back.metric("mAP S-Q") == 75.0
    assert json.loads(rep.to_json())["config"] == {"seed": 1}
    agg = aggregate_reports([rep, back])
    assert agg["folds"] == 2 and agg["ALL prec@1"] == pytest.approx(200 / 3)
    with pytest.raises(KeyError):
        rep.metric("top-1")


@st.composite
def score_matrices(draw):
    m = draw(st.integers(1, 20))
    n = draw(st.integers(2, 8))
    raw = draw(arrays(np.float64, (m, n), elements=st.sampled_from([0.1, 0.2, 0.5, 1.0, 3.0])))
    labels = draw(arrays(np.int64, (m,), elements=st.integers(0, n - 1)))
    return ScoreMatrix(_normalise(raw), labels)


@settings(max_examples=80, deadline=None)
@given(score_matrices())
def test_prec_at_k_monotone_and_matches_oracle(m):
    vals = [prec_at_k(m, k) for k in range(1, m.num_classes + 1)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0
    for k, v in enumerate(vals, start=1):
        assert abs(v - brute_prec_at_k(m.scores, m.labels, k)) < 1e-12


@settings(max_examples=80, deadline=None)
@given(score_matrices())
def test_classification_map_bounds_and_oracle(m):
    v = mean_ap_classification(m)
    assert 0.0 < v <= 1.0
    assert abs(v - brute_classification_map(m.scores, m.labels, range(m.num_classes))) < 1e-12


@settings(max_examples=60, deadline=None)
@given(score_matrices())
def test_confusion_rows_sum_to_class_counts(m):
    cm, present = confusion_matrix(m)
    assert cm.sum() == len(m.labels)
    np.testing.assert_array_equal(cm.sum(1), np.bincount(m.labels, minlength=m.num_classes))
    assert np.trace(cm) / len(m.labels) == pytest.approx(prec_at_k(m, 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 10_000))
def test_cmc_oracle(n_q, n_g, seed):
    rng = np.random.default_rng(seed)
    g_labels = rng.integers(0, 3, n_g)
    q_labels = rng.choice(g_labels, n_q)
    dist = rng.integers(0, 4, (n_q, n_g)).astype(float)
    cmc, mAP = cmc_single_query(dist, q_labels, g_labels, exclude_same_camera=False)
    ref_cmc, ref_map = brute_cmc_map(dist, q_labels, g_labels, None, None, False, n_g)
    np.testing.assert_allclose(cmc, ref_cmc, atol=1e-12)
    assert abs(mAP - ref_map) < 1e-12
    assert all(a <= b for a, b in zip(cmc, cmc[1:])) and cmc[-1] == 1.0
