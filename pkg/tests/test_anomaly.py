import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bssad.anomaly import (
    ConfusionMatrix,
    ScoreSeries,
    best_threshold_search,
    confusion,
    evaluate_at,
    f1,
    mahalanobis,
    mcc,
    point_adjust,
    score_series,
)
from bssad.errors import DataError
from bssad.filters import GaussianBelief
from bssad.timeseries import Dataset

from oracles import brute_counts, brute_f1, brute_mcc, brute_point_adjust, brute_threshold_search


def _pair(draw_len=200):
    return st.integers(1, draw_len).flatmap(
        lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                            st.lists(st.integers(0, 1), min_size=n, max_size=n))
    )


# -- mahalanobis ----------------------------------------------------------------------------

def test_mahalanobis_examples():
    b = GaussianBelief([1.0, 2.0], np.eye(2))
    assert mahalanobis([1.0, 2.0], b) == 0.0
    assert mahalanobis([4.0, 6.0], b) == pytest.approx(5.0, abs=1e-8)
    d = GaussianBelief([0.0, 0.0], np.diag([4.0, 1.0]))
    assert mahalanobis([2.0, 3.0], d) == pytest.approx(math.sqrt(10), abs=1e-8)


def test_mahalanobis_shape_mismatch():
    with pytest.raises(DataError):
        mahalanobis([1.0], GaussianBelief([0.0, 0.0], np.eye(2)))


def test_score_series_centered_beliefs():
    x = np.zeros((6, 2))
    x[4] = [3.0, 4.0]
    beliefs = [GaussianBelief([0.0, 0.0], np.eye(2)) for _ in range(4)]
    s = score_series(Dataset(x), beliefs, 2)
    assert s.offset == 2
    np.testing.assert_allclose(s.scores, [0, 0, 5, 0], atol=1e-8)
    with pytest.raises(DataError):
        score_series(Dataset(x), beliefs[:3], 2)


def test_score_series_spike_stands_out():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 3))
    x[150, 1] += 10.0
    beliefs = [GaussianBelief(np.zeros(3), np.eye(3)) for _ in range(295)]
    s = score_series(Dataset(x), beliefs, 5).scores
    assert s[145] >= 5 * np.median(s)


def test_score_series_rejects_negative():
    with pytest.raises(DataError):
        ScoreSeries(np.array([1.0, -1.0]), 0)


# -- point adjust / confusion ------------------------------------------------------------

def test_point_adjust_examples():
    assert point_adjust([0, 0, 1, 0, 0], [0, 1, 1, 1, 0]).tolist() == [0, 1, 1, 1, 0]
    assert point_adjust([0, 0, 0], [0, 1, 1]).tolist() == [0, 0, 0]
    assert point_adjust([1, 0, 1], [0, 0, 0]).tolist() == [1, 0, 1]


@given(_pair())
def test_point_adjust_idempotent_and_monotone(pair):
    p, y = pair
    once = point_adjust(p, y)
    assert once.tolist() == point_adjust(once, y).tolist()
    raw, adj = confusion(p, y), confusion(once, y)
    assert adj.tp >= raw.tp and adj.fn <= raw.fn


@given(_pair())
def test_point_adjust_matches_brute(pair):
    p, y = pair
    assert point_adjust(p, y).tolist() == brute_point_adjust(p, y)


def test_confusion_examples():
    assert confusion([1, 0], [1, 0]) == ConfusionMatrix(1, 0, 0, 1)
    p = [1, 1, 0, 0, 0, 0, 0, 0, 0, 0]
    y = [1, 0, 1, 0, 0, 0, 0, 0, 0, 0]
    assert confusion(p, y) == ConfusionMatrix(tp=1, fp=1, fn=1, tn=7)
    assert confusion([], []) == ConfusionMatrix(0, 0, 0, 0)


# -- metrics ------------------------------------------------------------------------------

def test_f1_examples():
    assert f1(ConfusionMatrix(2, 1, 1, 0)) == pytest.approx(4 / 6, abs=1e-15)
    assert f1(ConfusionMatrix(3, 0, 0, 5)) == 1.0
    assert f1(ConfusionMatrix(0, 0, 0, 9)) == 0.0


def test_mcc_examples():
    assert mcc(ConfusionMatrix(3, 0, 0, 5)) == 1.0
    assert abs(mcc(ConfusionMatrix(tp=2, fp=1, fn=1, tn=6)) - 11 / 21) <= 1e-12
    assert mcc(ConfusionMatrix(tp=4, fp=3, fn=0, tn=0)) == 0.0


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_metric_ranges(tp, fp, fn, tn):
    cm = ConfusionMatrix(tp, fp, fn, tn)
    assert 0.0 <= f1(cm) <= 1.0
    assert -1.0 - 1e-12 <= mcc(cm) <= 1.0 + 1e-12


@given(_pair())
def test_metrics_match_brute(pair):
    p, y = pair
    cm = confusion(p, y)
    counts = brute_counts(p, y)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == counts
    assert f1(cm) == brute_f1(*counts)
    assert mcc(cm) == brute_mcc(*counts)


# -- threshold search --------------------------------------------------------------------

def test_search_small_example():
    r = best_threshold_search([1.0, 2.0, 3.0], [0, 0, 1])
    assert r.best_threshold == 3.0 and r.best_f1 == 1.0
    assert [t for t, _, _ in r.table] == [1.0, 2.0, 3.0, math.inf]


def test_search_all_normal():
    r = best_threshold_search([0.5, 1.5, 2.5], [0, 0, 0])
    assert r.best_f1 == 0.0 and r.best_threshold == math.inf


def test_search_hand_enumeration_ten_points():
    s = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9, 0.7, 0.15, 0.05, 0.3]
    y = [0, 0, 0, 1, 1, 0, 0, 0, 0, 0]
    # segment {3,4} has max 0.8; thresholds above 0.8 miss it, 0.8 catches it
    # with fp from 0.9 only: tp=2 fp=1 fn=0 -> f1 0.8. Lower thresholds only add fps.
    r = best_threshold_search(s, y)
    assert r.best_threshold == 0.8
    assert r.best_f1 == pytest.approx(0.8)
    assert r.confusion == ConfusionMatrix(2, 1, 0, 7)


@settings(max_examples=300)
@given(st.integers(1, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n))),
    st.sampled_from(["f1", "mcc"]))
def test_search_matches_brute(case, metric):
    s, y = case
    r = best_threshold_search(s, y, metric)
    thr, value = brute_threshold_search(s, y, metric)
    assert r.best_threshold == thr
    got = r.best_f1 if metric == "f1" else r.best_mcc
    assert got == value


@given(st.lists(st.floats(0, 10), min_size=2, max_size=50), st.data())
def test_search_maximal(s, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(s), max_size=len(s)))
    r = best_threshold_search(s, y)
    fixed = float(np.median(s))
    assert r.best_f1 >= f1(evaluate_at(s, y, fixed))
