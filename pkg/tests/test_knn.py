from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from oracles import knn_brute_force, median_kth_distance
from conftest import blobs
from semadc import knn
from semadc.embedder import EmbeddingStore


# -- kernel -------------------------------------------------------------------


def test_weight_examples():
    assert knn.gaussian_weight(0.0, 1.0) == 1.0
    assert knn.gaussian_weight(1.5, 1.5) == pytest.approx(0.6065306597126334, rel=1e-15)
    assert knn.gaussian_weight(2.0, 1.0) == pytest.approx(0.1353352832366127, rel=1e-15)


@pytest.mark.parametrize("h", [0.0, -1.0])
def test_weight_rejects_bad_bandwidth(h):
    with pytest.raises(ValueError):
        knn.gaussian_weight(1.0, h)


def test_infinite_bandwidth_is_uniform():
    np.testing.assert_array_equal(knn.gaussian_weight(np.array([0.0, 3.0, 1e6]), math.inf), 1.0)


@given(st.lists(st.integers(0, 3000), min_size=2, max_size=30, unique=True), st.floats(0.1, 10))
def test_weight_strictly_decreasing(ds, h):
    # distances on a 0.01 grid so neighbouring weights are distinguishable in float64
    ds = np.sort(np.array(ds)) / 100
    w = knn.gaussian_weight(ds, h)
    # strictly decreasing wherever the weight has not underflowed to 0
    live = w > 0
    assert np.all(np.diff(w[live]) < 0)


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        knn.KernelParams(k=0)
    with pytest.raises(ValueError):
        knn.KernelParams(bandwidth_mode="fixed")
    with pytest.raises(ValueError):
        knn.KernelParams(bandwidth_mode="silverman")


# -- classify -----------------------------------------------------------------


def test_single_point_index():
    idx = knn.KnnIndex([[3.0, 4.0]], [7])
    label, scores = knn.classify(idx, [100.0, -5.0], knn.KernelParams(k=1, bandwidth=1.0, bandwidth_mode="fixed"))
    assert label == 7
    assert scores.shape == (1,)


def test_two_near_votes_beat_far_one():
    idx = knn.KnnIndex([[0, 0], [0, 1], [5, 0]], [1, 1, 2])
    label, scores = knn.classify(idx, [0.1, 0.5], knn.KernelParams(k=3, bandwidth=1.0, bandwidth_mode="fixed"))
    assert label == 1
    w = [math.exp(-(0.01 + 0.25) / 2), math.exp(-(0.01 + 0.25) / 2), math.exp(-(4.9**2 + 0.25) / 2)]
    np.testing.assert_allclose(scores, [w[0] + w[1], w[2]], rtol=1e-12)


def test_score_tie_goes_to_lower_class():
    idx = knn.KnnIndex([[1, 0], [-1, 0]], [2, 1])
    label, scores = knn.classify(idx, [0, 0], knn.KernelParams(k=2, bandwidth=1.0, bandwidth_mode="fixed"))
    assert scores[0] == scores[1]
    assert label == 1


def test_score_tie_prefers_smaller_summed_distance():
    # uniform weights: both classes score 2, class 2 sits closer in total
    idx = knn.KnnIndex([[2.0], [1.0], [-1.0], [-3.0]], [1, 2, 2, 1])
    label, scores = knn.classify(idx, [0.0], knn.KernelParams(k=4, bandwidth=math.inf, bandwidth_mode="fixed"))
    np.testing.assert_array_equal(scores, [2.0, 2.0])
    assert label == 2


def test_distance_tie_prefers_lower_training_index():
    idx = knn.KnnIndex([[1.0], [-1.0], [5.0]], [2, 1, 1])
    label, _ = knn.classify(idx, [0.0], knn.KernelParams(k=1, bandwidth=1.0, bandwidth_mode="fixed"))
    assert label == 2


def test_classify_errors():
    idx = knn.KnnIndex(np.zeros((3, 2)) + np.arange(3)[:, None], [1, 2, 1])
    with pytest.raises(ValueError):
        knn.classify(idx, [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        knn.classify(idx, [0.0, 0.0], knn.KernelParams(k=4, bandwidth=1.0, bandwidth_mode="fixed"))


def test_index_is_immutable():
    idx = knn.KnnIndex([[0.0, 1.0]], [1])
    with pytest.raises(ValueError):
        idx.vectors[0, 0] = 5.0


@pytest.mark.parametrize("k", [1, 3, 10])
def test_matches_brute_force(rng, k):
    train = rng.standard_normal((60, 4))
    labels = rng.integers(1, 5, 60)
    queries = rng.standard_normal((15, 4))
    idx = knn.KnnIndex(train, labels)
    params = knn.KernelParams(k=k)
    h = idx.bandwidth(params)
    preds, scores = knn.classify_batch(idx, queries, params)
    for q, p, s in zip(queries, preds, scores):
        label, ref = knn_brute_force(train, labels, q, k, h)
        assert p == label
        np.testing.assert_allclose(s, [ref[int(c)] for c in idx.classes], rtol=1e-12, atol=0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_isometry_invariance(seed, k):
    rng = np.random.default_rng(seed)
    train, labels, q = rng.standard_normal((30, 5)), rng.integers(0, 3, 30), rng.standard_normal((8, 5))
    rot = special_ortho_group.rvs(5, random_state=seed % (2**32 - 1))
    shift = rng.standard_normal(5)
    params = knn.KernelParams(k=k)
    p1, s1 = knn.classify_batch(knn.KnnIndex(train, labels), q, params)
    p2, s2 = knn.classify_batch(knn.KnnIndex(train @ rot.T + shift, labels), q @ rot.T + shift, params)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_allclose(s1, s2, rtol=1e-9, atol=1e-300)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.integers(1, 8))
def test_scale_covariance(seed, c, k):
    rng = np.random.default_rng(seed)
    train, labels, q = rng.standard_normal((30, 5)), rng.integers(0, 3, 30), rng.standard_normal((8, 5))
    p1, s1 = knn.classify_batch(knn.KnnIndex(train, labels), q, knn.KernelParams(k, 0.7, "fixed"))
    p2, s2 = knn.classify_batch(knn.KnnIndex(c * train, labels), c * q, knn.KernelParams(k, 0.7 * c, "fixed"))
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_allclose(s1, s2, rtol=1e-9, atol=1e-300)
    # median heuristic follows the scale automatically
    p3, _ = knn.classify_batch(knn.KnnIndex(train, labels), q, knn.KernelParams(k))
    p4, _ = knn.classify_batch(knn.KnnIndex(c * train, labels), c * q, knn.KernelParams(k))
    np.testing.assert_array_equal(p3, p4)


@given(st.integers(0, 2**32 - 1))
def test_huge_bandwidth_counts_neighbours(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 25))
    train, labels = rng.standard_normal((n, 3)), rng.integers(0, 4, n)
    q = rng.standard_normal(3)
    idx = knn.KnnIndex(train, labels)
    _, scores = knn.classify(idx, q, knn.KernelParams(k=n, bandwidth=1e9, bandwidth_mode="fixed"))
    counts = [np.sum(labels == c) for c in idx.classes]
    np.testing.assert_allclose(scores, counts, rtol=1e-12)


# -- bandwidth ----------------------------------------------------------------


def test_bandwidth_two_points():
    assert knn.median_heuristic_bandwidth(knn.KnnIndex([[0.0], [2.0]], [1, 2]), 1) == 2.0


def test_bandwidth_collinear():
    assert knn.median_heuristic_bandwidth(knn.KnnIndex([[0.0], [1.0], [3.0]], [1, 1, 2]), 1) == 1.0


def test_bandwidth_identical_vectors():
    with pytest.raises(ValueError):
        knn.median_heuristic_bandwidth(knn.KnnIndex(np.ones((4, 2)), [1, 1, 2, 2]), 2)


def test_bandwidth_duplicate_dominated_falls_back():
    idx = knn.KnnIndex([[0.0], [0.0], [0.0], [0.0], [0.5]], [1, 1, 1, 2, 2])
    assert knn.median_heuristic_bandwidth(idx, 1) == 0.5


def test_bandwidth_matches_oracle(rng):
    x = rng.standard_normal((25, 3))
    idx = knn.KnnIndex(x, np.zeros(25, dtype=int))
    for k in (1, 4, 10):
        assert knn.median_heuristic_bandwidth(idx, k) == pytest.approx(median_kth_distance(x, k), rel=1e-12)


# -- evaluation ---------------------------------------------------------------


def test_self_evaluation_k1():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((40, 6)), rng.integers(1, 4, 40)
    res = knn.evaluate_knn(knn.KnnIndex(x, y), EmbeddingStore(x.astype(np.float32), y), knn.KernelParams(k=1))
    assert res.accuracy == 1.0 and res.correct == res.total == 40


def test_separated_blobs():
    rng = np.random.default_rng(4)
    x, y = blobs(rng, 40, [[0, 0], [10, 0]])
    perm = rng.permutation(80)
    tr, te = perm[:60], perm[60:]
    idx = knn.KnnIndex(x[tr], y[tr])
    res = knn.evaluate_knn(idx, EmbeddingStore(x[te], y[te]), knn.KernelParams(k=10))
    assert res.accuracy == 1.0
    h = idx.bandwidth(knn.KernelParams(k=10))
    for q, p in zip(x[te], res.predictions):
        assert p == knn_brute_force(x[tr], y[tr], q, 10, h)[0]


def test_random_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((600, 5)), rng.integers(0, 2, 600)
        res = knn.evaluate_knn(knn.KnnIndex(x[:400], y[:400]), EmbeddingStore(x[400:], y[400:]))
        accs.append(res.accuracy)
    assert abs(np.mean(accs) - 0.5) <= 0.15


def test_evaluate_needs_labels():
    idx = knn.KnnIndex([[0.0], [1.0]], [1, 2])
    with pytest.raises(ValueError):
        knn.evaluate_knn(idx, EmbeddingStore(np.zeros((2, 1), np.float32)))


def test_cosine_metric_and_normalize():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    d = knn.pairwise_distances(np.array([[2.0, 0.0]]), x, "cosine")
    np.testing.assert_allclose(d, [[0.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(knn.l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]])), axis=1), [1, 0])


def test_leave_one_out_and_agreement():
    rng = np.random.default_rng(5)
    x, y = blobs(rng, 20, [[0, 0], [20, 0], [0, 20]])
    preds = knn.leave_one_out(x, y, knn.KernelParams(k=5))
    np.testing.assert_array_equal(preds, y)
    assert knn.neighbour_agreement(x, y, k=10) == 1.0
    assert knn.neighbour_agreement(x, rng.permutation(y), k=10) < 0.8
