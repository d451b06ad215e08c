import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embryostage.spatial import SpatialIndex

import oracles


def test_single_point():
    idx = SpatialIndex([[1.0, 2.0, 3.0]])
    assert idx.knn([0, 0, 0], 3) == [(0, pytest.approx(np.sqrt(14)))]
    assert idx.count_in_radius([1, 2, 3], 0.5) == 1


def test_empty_and_nonfinite_rejected():
    with pytest.raises(ValueError):
        SpatialIndex(np.empty((0, 3)))
    with pytest.raises(ValueError):
        SpatialIndex([[0.0, np.nan, 0.0]])


def test_knn_small_example():
    idx = SpatialIndex([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert [i for i, _ in idx.knn([0.9, 0, 0], 2)] == [1, 0]
    everything = idx.knn([0.9, 0, 0], 10)
    assert [i for i, _ in everything] == [1, 0, 2]


def test_duplicates_are_distinct_neighbours():
    idx = SpatialIndex([[0, 0, 0], [5, 5, 5], [0, 0, 0]])
    assert idx.knn([0, 0, 0], 2) == [(0, 0.0), (2, 0.0)]
    assert idx.knn([0, 0, 0], 1, exclude=0) == [(2, 0.0)]
    assert idx.count_in_radius([0, 0, 0], 1.0, exclude=0) == 1


def test_ties_break_by_lower_id():
    pts = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    idx = SpatialIndex(pts)
    assert [i for i, _ in idx.knn([0, 0, 0], 3)] == [0, 1, 2]


def test_collinear_radius_counts():
    pts = np.array([[30.0 * i, 0, 0] for i in range(6)])
    idx = SpatialIndex(pts)
    counts = idx.count_in_radius_batch(pts, 50.0, exclude=np.arange(6))
    assert list(counts) == [1, 2, 2, 2, 2, 1]
    # boundary inclusive: 60 um away counts at r = 60
    assert idx.count_in_radius(pts[2], 60.0, exclude=2) == 4
    assert list(idx.count_in_radius_batch(pts, 29.0, exclude=np.arange(6))) == [0] * 6


def test_10k_points_match_brute_force():
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 1000, size=(10_000, 3))
    idx = SpatialIndex(pts)
    queries = rng.uniform(0, 1000, size=(100, 3))
    ids, d = idx.knn_batch(queries, 7)
    for q, row_ids, row_d in zip(queries, ids, d):
        expect = oracles.knn(pts, q, 7)
        assert list(row_ids) == [j for j, _ in expect]
        assert list(row_d) == [x for _, x in expect]


def test_5000_points_k10_and_radius_50():
    rng = np.random.default_rng(12)
    pts = rng.uniform(0, 400, size=(5000, 3))
    idx = SpatialIndex(pts)
    for q in rng.uniform(0, 400, size=(50, 3)):
        assert idx.knn(q, 10) == oracles.knn(pts, q, 10)
    counts = idx.count_in_radius_batch(pts, 50.0, exclude=np.arange(len(pts)))
    dist = oracles.pairwise_distances(pts, pts)
    expect = (dist <= 50.0).sum(axis=1) - 1
    assert np.array_equal(counts, expect)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 300), k=st.integers(1, 12), seed=st.integers(0, 2**32 - 1),
       grid=st.booleans())
def test_property_matches_oracle(n, k, seed, grid):
    rng = np.random.default_rng(seed)
    # grid coordinates produce many exact ties and boundary hits
    pts = rng.integers(0, 6, size=(n, 3)).astype(float) if grid else rng.normal(size=(n, 3))
    idx = SpatialIndex(pts)
    q_id = int(rng.integers(n))
    for exclude in (None, q_id):
        assert idx.knn(pts[q_id], k, exclude=exclude) == oracles.knn(pts, pts[q_id], k, exclude)
    radii = [0.5, 1.0, 2.0, 3.0]
    counts = [idx.count_in_radius(pts[q_id], r, exclude=q_id) for r in radii]
    assert counts == [oracles.count_within(pts, pts[q_id], r, q_id) for r in radii]
    assert counts == sorted(counts)


def test_knn_distances_non_decreasing_and_deterministic():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(2000, 3))
    q = rng.normal(size=(40, 3))
    a = SpatialIndex(pts).knn_batch(q, 15)
    b = SpatialIndex(pts).knn_batch(q, 15)
    assert np.all(np.diff(a[1], axis=1) >= 0)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_knn_rejects_bad_k_and_radius():
    idx = SpatialIndex(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        idx.knn([0, 0, 0], 0)
    with pytest.raises(ValueError):
        idx.count_in_radius([0, 0, 0], 0.0)
