import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import blobs, nearest_center_scan
from vfchain.cluster import (
    ClusterModel,
    distance_filter,
    elbow_select,
    kmeans_assign,
    kmeans_assign_batch,
    kmeans_fit,
    resolve_threshold,
    write_elbow_csv,
)
from vfchain.errors import ConfigError, DimensionError


def test_two_symmetric_pairs():
    pts = [(0, 0), (0, 1), (10, 0), (10, 1)]
    m = kmeans_fit(pts, 2, seed=0)
    centers = sorted(map(tuple, m.centers))
    assert centers == [(0.0, 0.5), (10.0, 0.5)]
    assert m.inertia == pytest.approx(1.0, abs=1e-12)


def test_k1_center_is_mean():
    pts = np.random.default_rng(0).normal(size=(37, 5))
    m = kmeans_fit(pts, 1)
    np.testing.assert_allclose(m.centers[0], pts.mean(axis=0), atol=1e-12)


def test_k_equal_distinct_points_gives_zero_inertia():
    pts = np.random.default_rng(1).normal(size=(6, 3))
    assert kmeans_fit(pts, 6).inertia == 0.0


def test_invalid_k():
    with pytest.raises(ConfigError):
        kmeans_fit([[0, 0], [1, 1]], 3)
    with pytest.raises(ConfigError):
        kmeans_fit([[0, 0], [1, 1]], 0)


def test_duplicates_repair_empty_clusters():
    pts = np.ones((5, 2))
    m = kmeans_fit(pts, 2, seed=0)
    assert m.inertia == 0.0
    assert set(m.assignments) <= {0, 1}


def test_model_invariants_and_determinism():
    pts = np.random.default_rng(2).normal(size=(50, 4))
    a, b = kmeans_fit(pts, 5, seed=9), kmeans_fit(pts, 5, seed=9)
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.inertia == pytest.approx(np.sum(a.distances**2), abs=1e-9)
    assert np.all((a.assignments >= 0) & (a.assignments < 5))


def test_threads_do_not_change_the_result():
    pts = np.random.default_rng(3).normal(size=(80, 3))
    a, b = kmeans_fit(pts, 4, seed=1, jobs=1), kmeans_fit(pts, 4, seed=1, jobs=4)
    np.testing.assert_array_equal(a.centers, b.centers)


@pytest.mark.parametrize("seed", range(20))
def test_lloyd_inertia_non_increasing_and_fixed_point(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(10, 60)), int(rng.integers(1, 5))))
    m = kmeans_fit(pts, int(rng.integers(1, 8)), seed=seed, restarts=1)
    h = np.array(m.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])
    labels, _ = kmeans_assign_batch(m, pts)
    np.testing.assert_array_equal(labels, m.assignments)


def test_assign_examples():
    m = ClusterModel(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0]), np.array([0.0]), 0.0)
    assert kmeans_assign(m, [2.0, 0.0]) == (1, 0.0)
    assert kmeans_assign(m, [1.0, 5.0])[0] == 0  # tie goes to the lower index
    with pytest.raises(DimensionError):
        kmeans_assign(m, [1.0, 2.0, 3.0])


@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_assign_matches_exhaustive_scan(centers, point):
    m = ClusterModel(centers, np.zeros(1, dtype=int), np.zeros(1), 0.0)
    idx, dist = kmeans_assign(m, point)
    ref_idx, ref_dist = nearest_center_scan(point, centers)
    assert dist == pytest.approx(ref_dist, abs=1e-9)
    # float rounding may pick a different but equally near center
    assert idx == ref_idx or math.isclose(np.linalg.norm(point - centers[ref_idx]), dist, abs_tol=1e-9)


# --- elbow -------------------------------------------------------------------------


def test_single_candidate():
    pts = np.random.default_rng(0).normal(size=(10, 2))
    assert elbow_select(pts, [3], target=1).selected == 3


def test_four_blobs_select_four():
    rng = np.random.default_rng(42)
    pts, _ = blobs(rng, [(0, 0), (10, 0), (0, 10), (10, 10)], 25, 1.0)
    rep = elbow_select(pts, range(2, 9), target=4, seed=0)
    assert rep.selected == 4
    assert rep.diffs[0] is None
    # Lloyd minimises squared distances, so the unsquared totals may wobble slightly
    assert all(b <= a * 1.02 for a, b in zip(rep.totals, rep.totals[1:]))


def test_elbow_tie_prefers_smaller_k():
    rng = np.random.default_rng(5)
    pts, _ = blobs(rng, [(0, 0), (20, 0), (0, 20), (20, 20)], 10, 0.5)
    rep = elbow_select(pts, range(1, 8), target=100)
    eligible = [k for k, d in zip(rep.candidates[1:], rep.diffs[1:]) if d >= np.percentile(rep.diffs[1:], 75)]
    assert rep.selected == max(eligible)
    rep = elbow_select(pts, range(1, 8), target=1)
    assert rep.selected == min(eligible, key=lambda k: (abs(k - 1), k))


def test_elbow_errors():
    pts = np.zeros((4, 2))
    with pytest.raises(ConfigError):
        elbow_select(pts, [], target=1)
    with pytest.raises(ConfigError):
        elbow_select(pts, [3, 2], target=1)
    with pytest.raises(ConfigError):
        elbow_select(pts, [1, 5], target=1)


def test_elbow_csv(tmp_path):
    pts = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0]])
    rep = elbow_select(pts, [1, 2, 3], target=2)
    write_elbow_csv(tmp_path / "e.csv", rep)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "k,total_l2,diff"
    assert lines[1].startswith("1,") and lines[1].endswith(",")
    assert lines[3] == "3,0.0,2.0"


# --- thresholds -------------------------------------------------------------------


def _model_with_distances(d):
    d = np.asarray(d, dtype=float)
    return ClusterModel(np.zeros((1, 2)), np.zeros(len(d), dtype=int), d, float(np.sum(d**2)))


def test_absolute_thresholds():
    m = _model_with_distances([0.0, 1.0, 0.0, 2.0])
    assert list(distance_filter(m, ("absolute", math.inf))) == [0, 1, 2, 3]
    assert list(distance_filter(m, ("absolute", 0.0))) == [0, 2]


def test_percentile_keeps_nine_of_ten():
    d = np.random.default_rng(7).random(10)
    kept = distance_filter(_model_with_distances(d), ("percentile", 90))
    assert sorted(kept) == sorted(np.argsort(d)[:9])


def test_nearest_rank_percentile():
    assert resolve_threshold([5, 1, 3, 2, 4], ("percentile", 40)) == 2.0
    assert resolve_threshold([5, 1, 3, 2, 4], ("percentile", 100)) == 5.0
    assert resolve_threshold([5, 1, 3, 2, 4], ("percentile", 1)) == 1.0
    for bad in (0, 101, -5):
        with pytest.raises(ConfigError):
            resolve_threshold([1.0], ("percentile", bad))


@given(arrays(np.float64, 12, elements=st.floats(0, 5)), st.floats(0, 6), st.floats(0, 6))
def test_filter_monotone_in_threshold(d, t1, t2):
    m = _model_with_distances(d)
    lo, hi = sorted((t1, t2))
    assert set(distance_filter(m, ("absolute", lo))) <= set(distance_filter(m, ("absolute", hi)))
