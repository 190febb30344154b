import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrtnet.spatial import (
    AxisSet,
    SortedCloud,
    gaussian_scale_sampler,
    identity_scale_sampler,
    kd_sort,
    normalize_cloud,
    prob_kd_sort,
    rp_sort,
    split_axis_pdf,
    tta_orderings,
)


def assert_permutation(order, n):
    assert sorted(order.tolist()) == list(range(n))
    assert order.sum() == n * (n - 1) // 2


def split_directions(sc: SortedCloud, level: int):
    """Candidate split directions used at ``level`` for the sorter that built ``sc``."""
    if sc.tree_kind == "kd":
        return [np.eye(3)[level % 3]]
    return list(np.eye(3))


def assert_hierarchical(sc: SortedCloud, directions_at=None):
    """Every block at every level is cut by a plane into its two halves."""
    pts = sc.sorted_points
    n = len(pts)
    depth = int(math.log2(n))
    directions_at = directions_at or (lambda level: split_directions(sc, level))
    for level in range(depth):
        size = n >> level
        for start in range(0, n, size):
            left = pts[start:start + size // 2]
            right = pts[start + size // 2:start + size]
            ok = any((left @ d).max() <= (right @ d).min() for d in directions_at(level))
            assert ok, f"block {start}:{start + size} at level {level} is not a subtree"


def test_normalize_examples():
    np.testing.assert_allclose(normalize_cloud([[0, 0, 0], [2, 0, 0]]), [[-0.5, 0, 0], [0.5, 0, 0]])
    np.testing.assert_array_equal(normalize_cloud([[1, 2, 3]] * 4), np.zeros((4, 3)))


def test_normalize_idempotent_and_bounds():
    pts = np.random.default_rng(0).normal(size=(64, 3)) * [3, 1, 0.2] + 7
    a = normalize_cloud(pts)
    np.testing.assert_allclose(normalize_cloud(a), a, atol=1e-12)
    assert np.all(np.abs(a) <= 0.5 + 1e-9)
    lo, hi = a.min(axis=0), a.max(axis=0)
    np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-12)
    assert abs((hi - lo).max() - 1) < 1e-12


def test_kd_hand_trace():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    sc = kd_sort(pts[[3, 0, 2, 1]])
    np.testing.assert_array_equal(sc.sorted_points, [[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]])


def test_kd_two_points():
    sc = kd_sort([[1.0, 0, 0], [0.0, 5, 5]])
    np.testing.assert_array_equal(sc.sorted_points[:, 0], [0, 1])


def test_kd_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        kd_sort(np.zeros((6, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_kd_permutation_invariance(depth, seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((2**depth, 3))
    perm = rng.permutation(len(pts))
    np.testing.assert_array_equal(kd_sort(pts).sorted_points, kd_sort(pts[perm]).sorted_points)


@pytest.mark.parametrize("n", [2, 16, 256, 1024])
def test_all_sorters_produce_hierarchical_permutations(n):
    rng = np.random.default_rng(n)
    pts = normalize_cloud(rng.normal(size=(n, 3)) * [1, 2, 0.5])
    for seed in range(3):
        kd = kd_sort(pts)
        pk = prob_kd_sort(pts, seed)
        axes = AxisSet.random(int(math.log2(n)), seed=seed)
        rp = rp_sort(pts, axes, seed)
        rp_free = rp_sort(pts, AxisSet.random(5, seed=seed, shared=False), seed)
        for sc in (kd, pk, rp, rp_free):
            assert_permutation(sc.order, n)
        assert_hierarchical(kd)
        assert_hierarchical(pk)
        assert_hierarchical(rp, lambda level: [axes.axes[level % len(axes.axes)]])
        free = AxisSet.random(5, seed=seed, shared=False).axes
        assert_hierarchical(rp_free, lambda level: list(free))


def test_hierarchical_with_ties():
    # heavy coordinate duplication exercises the tie-break chain
    pts = np.random.default_rng(1).integers(0, 3, size=(128, 3)).astype(float)
    for sc in (kd_sort(pts), prob_kd_sort(pts, 4)):
        assert_permutation(sc.order, 128)
    assert_hierarchical(kd_sort(pts))


def test_split_pdf_examples():
    np.testing.assert_allclose(split_axis_pdf([0.4, 0.4, 0.4]), [1 / 3] * 3)
    e = math.e
    np.testing.assert_allclose(split_axis_pdf([1, 0, 0]), [e / (e + 2), 1 / (e + 2), 1 / (e + 2)])
    np.testing.assert_allclose(split_axis_pdf([1, 0, 0]), [0.576, 0.212, 0.212], atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=3, max_size=3), st.floats(-10, 10))
def test_split_pdf_shift_invariance(spans, c):
    p = split_axis_pdf(spans)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(split_axis_pdf(np.array(spans) + c), p, atol=1e-12)


def test_prob_kd_reproducible():
    pts = np.random.default_rng(0).random((256, 3))
    a, b = prob_kd_sort(pts, 17), prob_kd_sort(pts, 17)
    np.testing.assert_array_equal(a.order, b.order)
    assert any(not np.array_equal(a.order, prob_kd_sort(pts, s).order) for s in range(5))


def test_prob_kd_elongated_chooses_x():
    rng = np.random.default_rng(3)
    pts = rng.random((64, 3)) * [50.0, 1.0, 1.0]
    first_split_x = 0
    for seed in range(1000):
        sc = prob_kd_sort(pts, seed).sorted_points
        if sc[:32, 0].max() <= sc[32:, 0].min():
            first_split_x += 1
    assert first_split_x / 1000 > 0.99


def test_rp_canonical_axes_equal_kd():
    rng = np.random.default_rng(9)
    for pts in (rng.random((512, 3)), rng.integers(0, 4, size=(256, 3)).astype(float)):
        np.testing.assert_array_equal(rp_sort(pts, AxisSet.canonical()).order, kd_sort(pts).order)


def test_rp_shared_translation_invariant():
    rng = np.random.default_rng(2)
    pts = rng.random((256, 3))
    axes = AxisSet.random(8, seed=11)
    a = rp_sort(pts, axes)
    b = rp_sort(pts + [3.0, -1.0, 0.5], axes)
    np.testing.assert_array_equal(a.order, b.order)


def test_axis_set_units():
    axes = AxisSet.random(10, seed=0)
    np.testing.assert_allclose(np.linalg.norm(axes.axes, axis=1), 1, atol=1e-12)
    with pytest.raises(ValueError):
        AxisSet([[1.0, 1.0, 0.0]])


def test_locality_beats_random_order():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.random((256, 3))
        kd = kd_sort(pts).sorted_points
        rnd = pts[rng.permutation(256)]
        step = lambda p: np.linalg.norm(np.diff(p, axis=0), axis=1).mean()
        assert step(kd) < step(rnd)


def test_tta_identity_single_version():
    pts = normalize_cloud(np.random.default_rng(0).random((64, 3)))
    [(scaled, sc)] = tta_orderings(pts, 1, identity_scale_sampler, seed=5)
    np.testing.assert_allclose(scaled, pts, atol=1e-12)
    again = prob_kd_sort(scaled, sc.seed)
    np.testing.assert_array_equal(sc.order, again.order)


def test_tta_sixteen_versions_valid():
    pts = normalize_cloud(np.random.default_rng(1).random((128, 3)))
    versions = tta_orderings(pts, 16, gaussian_scale_sampler(0.5), seed=2)
    assert len(versions) == 16
    for scaled, sc in versions:
        assert_permutation(sc.order, 128)
        assert_hierarchical(sc)
        assert np.all(np.abs(scaled) <= 0.5 + 1e-9)


def test_gaussian_sampler_moments():
    rng = np.random.default_rng(0)
    draws = np.array([gaussian_scale_sampler(0.25)(rng) for _ in range(10_000)])
    assert np.all(draws > 0)
    assert np.all(np.abs(draws.std(axis=0) - 0.25) < 0.02)
    assert np.all(np.abs(draws.mean(axis=0) - 1) < 0.02)
