import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnet.clustering import (
    ClusterConfig,
    LabelMap,
    SoftLabelMap,
    candidate_ks,
    gap_statistic,
    k_schedule,
    kmeans,
    label_against,
    make_label_maps,
    nearest_centroid,
    soft_assign,
)
from srnet.errors import DepthMismatch, EmptyInput, KTooLarge
from srnet.evaluation import dice
from srnet.features import FeatureStack, extract
from srnet.imaging import Image
from srnet.synth import planted_clusters, structured_image


def _same_partition(a, b):
    """True when two labelings agree up to a permutation of label ids."""
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def _majority_map(labels, truth, n_true):
    out = np.zeros_like(truth)
    for c in np.unique(labels):
        m = labels == c
        out[m] = np.bincount(truth[m], minlength=n_true).argmax()
    return out


# ------------------------------------------------------------------ kmeans


def test_kmeans_k1_is_global_mean(rng):
    pts = rng.normal(size=(50, 3))
    res = kmeans(pts, 1, seed=0)
    np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0), atol=1e-12)
    assert res.wk == pytest.approx(pts.var(axis=0).sum() * 50, rel=1e-12)


def test_kmeans_square_corners():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    res = kmeans(pts, 4, seed=3)
    assert sorted(res.assignments.tolist()) == [0, 1, 2, 3]
    assert res.wk == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_two_blobs(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, 200)
    pts = np.column_stack([truth * 10.0, np.zeros(200)]) + rng.normal(0, 0.05, (200, 2))
    res = kmeans(pts, 2, seed=seed)
    assert _same_partition(res.assignments, truth)


def test_kmeans_errors():
    with pytest.raises(KTooLarge):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(EmptyInput):
        kmeans(np.zeros((0, 2)), 1)


def test_kmeans_deterministic(rng):
    pts = rng.normal(size=(300, 4))
    a, b = kmeans(pts, 5, seed=11), kmeans(pts, 5, seed=11)
    assert np.array_equal(a.assignments, b.assignments)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_kmeans_handles_duplicate_points():
    pts = np.repeat(np.array([[0.0, 0.0], [5.0, 5.0]]), 10, axis=0)
    res = kmeans(pts, 3, seed=0)
    assert res.wk == pytest.approx(0.0, abs=1e-20)


def test_dispersion_monotone_in_k():
    pts, _ = planted_clusters(400, 4, dim=3, separation=6, sigma=1.0, seed=1)
    med = [np.median([kmeans(pts, k, seed=s).wk for s in range(20)]) for k in range(1, 8)]
    assert all(b <= a for a, b in zip(med, med[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_planted_exact_recovery(seed):
    pts, labels = planted_clusters(300, 4, dim=2, separation=200 * 0.5, sigma=0.5, seed=seed)
    res = kmeans(pts, 4, seed=seed)
    assert _same_partition(res.assignments, labels)


# ---------------------------------------------------------------- schedule


def test_schedule_n100():
    assert list(itertools.islice(k_schedule(100), 4)) == [75, 67, 60, 54]


def test_schedule_n4():
    assert list(k_schedule(4)) == [3, 2]


@given(st.integers(2, 100_000))
def test_schedule_strictly_decreasing(n):
    ks = list(k_schedule(n))
    assert all(b < a for a, b in zip(ks, ks[1:]))
    assert not ks or ks[-1] >= 2


def test_candidates_clipped():
    ks = candidate_ks(128 * 128, 2, 16)
    assert ks[0] == 2 and ks[-1] == 16
    assert ks == sorted(set(ks))


# ----------------------------------------------------------- gap statistic


@pytest.mark.parametrize("seed", range(5))
def test_gap_three_blobs(seed):
    pts, _ = planted_clusters(300, 3, dim=2, separation=20, sigma=1.0, seed=seed)
    assert gap_statistic(pts, list(range(2, 9)), B=20, seed=seed).chosen_k == 3


def test_gap_single_blob():
    pts = np.random.default_rng(0).normal(0, 0.1, (300, 2))
    assert gap_statistic(pts, [1, 2, 3, 4], B=20, seed=0).chosen_k == 1


def test_gap_rule_oracle():
    pts, _ = planted_clusters(200, 4, dim=2, separation=8, sigma=1.5, seed=9)
    res = gap_statistic(pts, [1, 2, 3, 4, 5, 6], B=10, seed=9)
    gaps = [r.gap for r in res.records]
    sks = [r.sk for r in res.records]
    expected = next((r.k for j, r in enumerate(res.records[:-1]) if gaps[j] >= gaps[j + 1] - sks[j + 1]), None)
    assert res.chosen_k == (expected if expected is not None else 6)
    assert res.no_elbow == (expected is None)


def test_gap_b1_uses_sqrt2_factor():
    pts, _ = planted_clusters(100, 2, separation=10, seed=0)
    res = gap_statistic(pts, [1, 2, 3], B=1, seed=0)
    # with one reference set the spread is zero, so every sk is exactly zero
    assert all(r.sk == 0.0 for r in res.records)
    assert all(math.isfinite(r.gap) for r in res.records)


def test_gap_no_elbow_flag():
    # a uniform square has no cluster structure, while the strictly increasing
    # ks force the fallback whenever no candidate qualifies
    pts = np.random.default_rng(0).random((200, 2))
    res = gap_statistic(pts, [2, 3], B=5, seed=0)
    assert res.chosen_k in (2, 3)
    if res.chosen_k == 3:
        assert res.no_elbow


def test_gap_permutation_invariant():
    pts, _ = planted_clusters(200, 3, separation=20, sigma=1.0, seed=4)
    perm = np.random.default_rng(1).permutation(len(pts))
    a = gap_statistic(pts, [2, 3, 4, 5], B=5, seed=2)
    b = gap_statistic(pts[perm], [2, 3, 4, 5], B=5, seed=2)
    assert a.chosen_k == b.chosen_k
    assert [r.gap for r in a.records] == [r.gap for r in b.records]


def test_gap_csv():
    pts, _ = planted_clusters(60, 2, separation=10, seed=0)
    csv_text = gap_statistic(pts, [1, 2], B=3, seed=0).to_csv()
    lines = csv_text.splitlines()
    assert lines[0] == "k,Wk,gap,sk" and len(lines) == 3


# -------------------------------------------------------------- label maps


def test_nearest_centroid_oracle(rng):
    pts = rng.normal(size=(40, 3))
    cents = rng.normal(size=(5, 3))
    idx, _ = nearest_centroid(pts, cents)
    for i, p in enumerate(pts):
        d = [float(((p - c) ** 2).sum()) for c in cents]
        assert idx[i] == int(np.argmin(d))


def test_nearest_centroid_tie_lowest_index():
    idx, _ = nearest_centroid(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert idx[0] == 0


def test_soft_assign_low_temperature_is_hard(rng):
    d2 = rng.random((30, 4)) * 5
    p = soft_assign(d2, temperature_scale=1e-6)
    np.testing.assert_allclose(p, np.eye(4)[np.argmin(d2, axis=1)], atol=1e-12)


def test_soft_map_validation():
    with pytest.raises(ValueError):
        SoftLabelMap(np.full((2, 2, 2), 0.6))
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 3]]), 3)


def test_label_map_degenerate_flag():
    assert LabelMap(np.array([[0, 0]]), 2).degenerate
    assert not LabelMap(np.array([[0, 1]]), 2).degenerate


def test_shared_codebook_labels(rng):
    feats = FeatureStack(rng.normal(size=(4, 5, 3)))
    cents = rng.normal(size=(3, 3))
    hard, soft = label_against(feats, cents)
    idx, _ = nearest_centroid(feats.points(), cents)
    np.testing.assert_array_equal(hard.labels.ravel(), idx)
    np.testing.assert_array_equal(soft.hard().labels, hard.labels)


def test_identical_images_identical_maps():
    img = Image(np.random.default_rng(2).random((24, 24)))
    fs = extract(img)
    maps = make_label_maps(fs, fs, ClusterConfig(B=3, k_max=6))
    np.testing.assert_array_equal(maps.ref.labels, maps.flt.labels)
    np.testing.assert_array_equal(maps.ref_soft.probs, maps.flt_soft.probs)


def test_depth_mismatch():
    with pytest.raises(DepthMismatch):
        make_label_maps(FeatureStack(np.zeros((8, 8, 3))), FeatureStack(np.zeros((8, 8, 4))))


def _two_region_pair(n=64):
    arr = np.full((n, n), 0.3)
    arr[:, n // 2:] = 0.7
    truth = (np.arange(n)[None, :] >= n // 2).repeat(n, axis=0).astype(int)
    return Image(arr), truth


def test_two_region_masks_recovered():
    img, truth = _two_region_pair()
    fs = extract(img)
    maps = make_label_maps(fs, fs)
    mapped = _majority_map(maps.ref.labels, truth, 2)
    assert min(dice(mapped, truth, c) for c in (0, 1)) >= 0.99


@pytest.mark.xfail(strict=True, reason="edge-sensitive filter channels make the gap statistic "
                   "prefer k > 2 on a two-region step image; see the decision ledger")
def test_two_region_k_is_two():
    img, _ = _two_region_pair()
    fs = extract(img)
    chosen = [make_label_maps(fs, fs, ClusterConfig(seed=s)).gap.chosen_k for s in range(4)]
    assert chosen == [2, 2, 2, 2]


@pytest.mark.xfail(strict=True, reason="region boundaries dominate the standardized features, so "
                   "some planted regions merge or split; see the decision ledger")
def test_structured_regions_recovered_per_region():
    for seed in range(10):
        base, regions = structured_image(64, 64, 4, seed=seed)
        fs = extract(base)
        maps = make_label_maps(fs, fs)
        mapped = _majority_map(maps.ref.labels, regions.labels, 4)
        assert min(dice(mapped, regions.labels, c) for c in range(4)) >= 0.95


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_soft_maps_are_simplex(seed):
    img = Image(np.random.default_rng(seed).random((16, 16)))
    fs = extract(img)
    maps = make_label_maps(fs, fs, ClusterConfig(B=2, k_max=4, gap_subsample=300))
    p = maps.ref_soft.probs
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
