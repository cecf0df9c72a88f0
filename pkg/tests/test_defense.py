import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rkd import defense as R


# -- cosine scores -------------------------------------------------------------------------

def test_cosine_examples():
    g = np.array([1.0, -2.0, 3.0])
    s = R.cosine_scores([g, -g, 5 * g], g).scores
    np.testing.assert_allclose(s, [1.0, -1.0, 1.0], atol=1e-15)


def test_cosine_zero_client_flagged():
    out = R.cosine_scores([np.zeros(3), np.ones(3)], np.ones(3), client_ids=[4, 7])
    assert out.scores[0] == 0.0 and out.zero_norm == (4,)


def test_cosine_zero_global_rejected():
    with pytest.raises(ValueError):
        R.cosine_scores([np.ones(3)], np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**32))
def test_cosine_bounded(n, dim, seed):
    rng = np.random.default_rng(seed)
    s = R.cosine_scores(list(rng.normal(size=(n, dim)) * 1e3), rng.normal(size=dim) + 1e-3).scores
    assert np.all(np.abs(s) <= 1 + 1e-6)


# -- Q schedule -------------------------------------------------------------------------------

def test_q_schedule_examples():
    assert R.dynamic_min_cluster_size(30, 0) == 6
    assert R.dynamic_min_cluster_size(30, 5) == 2
    assert R.dynamic_min_cluster_size(30, 100) == 2


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 500), st.integers(0, 1000))
def test_q_schedule_formula(n, r):
    expected = max(2, math.ceil(n / 5 - r))  # 0.2 * N, evaluated exactly
    assert R.dynamic_min_cluster_size(n, r) == min(expected, n)
    assert R.dynamic_min_cluster_size(n, r) >= 2


# -- benign cluster ----------------------------------------------------------------------------

def test_classify_high_cluster_is_benign():
    scores = np.array([0.9, 0.91, 0.1, 0.12])
    out = R.classify_benign([0, 0, 1, 1], scores)
    assert out.benign_cluster == 0 and out.benign_clients == {0, 1}
    assert out.cluster_means[0] == max(out.cluster_means.values())


def test_classify_single_cluster_and_all_noise():
    assert R.classify_benign([0, 0, 0], [0.1, 0.2, 0.3]).benign_clients == {0, 1, 2}
    out = R.classify_benign([-1, -1], [0.5, 0.6])
    assert out.benign_clients == {0, 1} and out.warnings


def test_classify_tie_rules():
    # equal means: larger cluster wins
    out = R.classify_benign([0, 0, 1, 1, 1], [0.5, 0.5, 0.5, 0.5, 0.5])
    assert out.benign_cluster == 1
    # equal means and sizes: lower id wins
    out = R.classify_benign([1, 1, 0, 0], [0.5, 0.5, 0.5, 0.5])
    assert out.benign_cluster == 0


def test_classify_noise_is_malicious():
    out = R.classify_benign([0, 0, -1], [0.9, 0.9, 0.95], client_ids=[3, 4, 5])
    assert out.benign_clients == {3, 4}


def test_cluster_clients_end_to_end():
    s = R.SimilarityScores(np.array([0.90, 0.91, 0.92, 0.89, 0.10, 0.12]), tuple(range(6)))
    assert R.cluster_clients(s, 2).benign_clients == {0, 1, 2, 3}


# -- median and selection ----------------------------------------------------------------------

def test_median_examples():
    np.testing.assert_array_equal(R.elementwise_median([[1.0], [2.0], [100.0]]), [2.0])
    np.testing.assert_array_equal(R.elementwise_median([[1.0], [3.0]]), [2.0])


def test_median_majority():
    v = np.array([1.5, -2.0, 0.25])
    rest = [np.array([1e6, 1e6, 1e6]), np.array([-1e6, 5.0, 3.0])]
    np.testing.assert_array_equal(R.elementwise_median([v, v, v] + rest), v)


def test_l1_examples():
    m = np.array([1.0, 2.0, 3.0, 4.0])
    d = R.l1_distances([m, m + [1, -1, 0, 0]], m)
    np.testing.assert_array_equal(d, [0.0, 2.0])


def test_l1_permutation():
    rng = np.random.default_rng(0)
    ps = list(rng.normal(size=(5, 4)))
    m = R.elementwise_median(ps)
    perm = [3, 0, 4, 1, 2]
    np.testing.assert_array_equal(R.l1_distances([ps[i] for i in perm], m), R.l1_distances(ps, m)[perm])


def test_select_equal_distances_keeps_all():
    sel = R.select_ensemble([np.zeros(2)] * 3, [4.0, 4.0, 4.0])
    assert sel.threshold == 4.0 and sel.selected == (0, 1, 2)


def test_select_excludes_outlier():
    sel = R.select_ensemble([np.zeros(1)] * 4, [0.0, 0.0, 0.0, 10.0], 1.0)
    # hand calculation: mu = 2.5, sigma = sqrt((3 * 6.25 + 56.25) / 4) = 4.3301, eps = 6.8301
    assert sel.threshold == pytest.approx(2.5 + math.sqrt(75 / 4), rel=1e-15)
    assert sel.selected == (0, 1, 2)


def test_select_huge_k_keeps_all():
    sel = R.select_ensemble([np.zeros(1)] * 4, [0.0, 1.0, 2.0, 1e6], 1e9)
    assert sel.selected == (0, 1, 2, 3)


def test_select_rejects_negative_k():
    with pytest.raises(ValueError):
        R.select_ensemble([np.zeros(1)], [0.0], -1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=10), st.floats(0, 5))
def test_selection_invariants(d, k):
    sel = R.select_ensemble([np.zeros(1)] * len(d), d, k)
    mu = np.mean(d)
    assert sel.threshold == pytest.approx(mu + k * np.std(d), rel=1e-9, abs=1e-9)
    assert len(sel.selected) >= 1
    for i in sel.selected:
        assert d[i] <= sel.threshold or d[i] == min(d)


def test_median_selection_ids():
    v = np.ones(3)
    sel = R.median_selection([v, v, v * 50], [7, 8, 9])
    assert sel.selected == (7, 8)
