"""Tests for the geometric kernels: FPS, kNN, the sample-and-group layer
and input augmentation."""

import numpy as np
import pytest

import pct.autodiff as ad
from pct.autodiff import Tensor
from pct.geometry import (
    AugmentConfig,
    CountError,
    PointCloud,
    SgLayerConfig,
    augment,
    canonical_rank,
    farthest_point_sample,
    knn,
    sg_layer,
)
from pct.layers import LBR


def brute_force_fps(coords, m):
    """Independent greedy oracle with the same canonical tie-breaks."""
    n = len(coords)
    order = sorted(range(n), key=lambda i: tuple(coords[i]))
    rank = {idx: pos for pos, idx in enumerate(order)}

    def pick(values):
        best = max(values)
        ties = [i for i, v in enumerate(values) if v == best]
        return min(ties, key=lambda i: rank[i])

    centroid = coords.mean(axis=0)
    selected = [pick([np.linalg.norm(coords[i] - centroid) for i in range(n)])]
    mind = [np.linalg.norm(coords[i] - coords[selected[0]]) for i in range(n)]
    while len(selected) < m:
        nxt = pick(mind)
        selected.append(nxt)
        for i in range(n):
            mind[i] = min(mind[i], np.linalg.norm(coords[i] - coords[nxt]))
    return selected


def brute_force_knn(coords, queries, k):
    order = sorted(range(len(coords)), key=lambda i: tuple(coords[i]))
    rank = {idx: pos for pos, idx in enumerate(order)}
    out = []
    for q in queries:
        dists = [(np.linalg.norm(coords[i] - q), rank[i], i)
                 for i in range(len(coords))]
        out.append([i for _, _, i in sorted(dists)[:k]])
    return np.array(out)


def literal_sg_oracle(cloud, features, cfg):
    """Straight-line aggregation: per sampled point, stack feature offsets
    against its neighbors, append the center feature, run both LBR blocks
    and max-pool over the group."""
    sample_idx = farthest_point_sample(cloud, cfg.n_out)
    nbr = knn(cloud, cloud.coords[sample_idx], cfg.k)
    rows = []
    for gi, p in enumerate(sample_idx):
        group = []
        for q in nbr[gi]:
            delta = features[q] - features[p]
            group.append(np.concatenate([delta, features[p]]))
        rows.append(np.array(group))
    stacked = Tensor(np.concatenate(rows, axis=0))
    h = cfg.lbr2(cfg.lbr1(stacked)).values
    pooled = np.array([
        h[gi * cfg.k:(gi + 1) * cfg.k].max(axis=0)
        for gi in range(cfg.n_out)
    ])
    return cloud.coords[sample_idx], pooled


class TestPointCloud:
    def test_requires_at_least_one_point(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_non_finite_coords(self):
        with pytest.raises(ValueError):
            PointCloud([[0.0, 0.0, np.inf]])

    def test_rejects_non_unit_normals(self):
        with pytest.raises(ValueError):
            PointCloud([[0.0, 0.0, 0.0]], normals=[[2.0, 0.0, 0.0]])

    def test_subset_carries_attributes(self):
        cloud = PointCloud(
            np.eye(3), normals=np.eye(3), labels=[0, 1, 2], category=5
        )
        sub = cloud.subset([2, 0])
        assert np.array_equal(sub.coords, [[0, 0, 1], [1, 0, 0]])
        assert np.array_equal(sub.labels, [2, 0])
        assert sub.category == 5


class TestFarthestPointSample:
    def test_m_equals_n_is_exhaustive(self):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(12, 3)))
        idx = farthest_point_sample(cloud, 12)
        assert sorted(idx.tolist()) == list(range(12))

    def test_collinear_example(self):
        coords = np.zeros((10, 3))
        coords[:, 0] = np.arange(10.0)
        idx = farthest_point_sample(PointCloud(coords), 3)
        # start at 0 (centroid-distance tie with 9 broken lexicographically),
        # then 9 (farthest from 0), then 4 (max-min tie 4/5 -> smaller rank)
        assert idx.tolist() == [0, 9, 4]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        coords = rng.normal(size=(64, 3))
        idx = farthest_point_sample(PointCloud(coords), 16)
        assert idx.tolist() == brute_force_fps(coords, 16)

    def test_oversampling_raises(self):
        cloud = PointCloud(np.eye(3))
        with pytest.raises(CountError):
            farthest_point_sample(cloud, 4)

    def test_permutation_invariant_as_a_set(self):
        rng = np.random.default_rng(2)
        coords = rng.normal(size=(30, 3))
        cloud = PointCloud(coords)
        perm = rng.permutation(30)
        permuted = PointCloud(coords[perm])
        a = cloud.coords[farthest_point_sample(cloud, 10)]
        b = permuted.coords[farthest_point_sample(permuted, 10)]
        a_sorted = a[np.lexsort((a[:, 2], a[:, 1], a[:, 0]))]
        b_sorted = b[np.lexsort((b[:, 2], b[:, 1], b[:, 0]))]
        assert np.array_equal(a_sorted, b_sorted)

    def test_min_pairwise_distance_never_increases_with_m(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.normal(size=(40, 3)))

        def min_pairwise(coords):
            d = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
            return d[~np.eye(len(coords), dtype=bool)].min()

        last = np.inf
        for m in range(2, 20):
            coords = cloud.coords[farthest_point_sample(cloud, m)]
            current = min_pairwise(coords)
            assert current <= last + 1e-12
            last = current


class TestKnn:
    def test_query_on_cloud_point_returns_itself(self):
        rng = np.random.default_rng(4)
        coords = rng.normal(size=(8, 3))
        cloud = PointCloud(coords)
        idx = knn(cloud, coords[[3]], 1)
        assert idx[0, 0] == 3

    def test_hand_distance_table(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]])
        idx = knn(cloud, np.array([[0.0, 0.0, 0.0]]), 2)
        assert set(idx[0].tolist()) == {0, 1}

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        coords = rng.normal(size=(50, 3))
        queries = rng.normal(size=(9, 3))
        got = knn(PointCloud(coords), queries, 7)
        assert np.array_equal(got, brute_force_knn(coords, queries, 7))

    def test_k_exceeding_n_raises(self):
        with pytest.raises(CountError):
            knn(PointCloud(np.eye(3)), np.zeros((1, 3)), 4)

    def test_permutation_invariant_as_coordinate_sets(self):
        rng = np.random.default_rng(6)
        coords = rng.normal(size=(25, 3))
        perm = rng.permutation(25)
        queries = rng.normal(size=(4, 3))
        a = PointCloud(coords).coords[knn(PointCloud(coords), queries, 5)]
        b = PointCloud(coords[perm]).coords[knn(PointCloud(coords[perm]), queries, 5)]
        assert np.abs(a - b).max() <= 1e-12


class TestSgLayer:
    def make_cfg(self, d_in, channels, n_out, k, seed):
        rng = np.random.default_rng(seed)
        cfg = SgLayerConfig(
            n_out=n_out, k=k,
            lbr1=LBR(2 * d_in, channels, rng),
            lbr2=LBR(channels, channels, rng),
        )
        cfg.lbr1.eval()
        cfg.lbr2.eval()
        return cfg

    def test_identical_features_zero_offsets(self):
        rng = np.random.default_rng(7)
        cloud = PointCloud(rng.normal(size=(10, 3)))
        feat_row = rng.normal(size=4)
        features = Tensor(np.tile(feat_row, (10, 1)))
        cfg = self.make_cfg(4, 6, n_out=4, k=3, seed=8)
        _, pooled = sg_layer(cloud, features, cfg)
        reference = cfg.lbr2(cfg.lbr1(Tensor(
            np.concatenate([np.zeros(4), feat_row])[None, :]
        ))).values
        assert np.abs(pooled.values - reference).max() <= 1e-10

    def test_k1_neighbors_are_the_points_themselves(self):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.normal(size=(6, 3)))
        features = Tensor(rng.normal(size=(6, 4)))
        cfg = self.make_cfg(4, 5, n_out=6, k=1, seed=10)
        sampled, pooled = sg_layer(cloud, features, cfg)
        assert sampled.n == 6
        # with k=1 each group is the point itself, so delta = 0
        order = np.argsort([tuple(c) for c in sampled.coords], axis=0)
        zero_delta = ad.concat(
            [Tensor(np.zeros((6, 4))),
             ad.gather_rows(features, knn(cloud, sampled.coords, 1).ravel())],
            axis=1,
        )
        reference = cfg.lbr2(cfg.lbr1(zero_delta)).values
        assert np.abs(pooled.values - reference).max() <= 1e-10
        del order

    def test_matches_literal_oracle(self):
        rng = np.random.default_rng(11)
        cloud = PointCloud(rng.normal(size=(32, 3)))
        feat_values = rng.normal(size=(32, 4))
        cfg = self.make_cfg(4, 8, n_out=8, k=4, seed=12)
        sampled, pooled = sg_layer(cloud, Tensor(feat_values), cfg)
        oracle_coords, oracle_feats = literal_sg_oracle(cloud, feat_values, cfg)
        assert np.abs(sampled.coords - oracle_coords).max() <= 1e-12
        assert np.abs(pooled.values - oracle_feats).max() <= 1e-10

    def test_permutation_invariant_as_a_set(self):
        rng = np.random.default_rng(13)
        coords = rng.normal(size=(20, 3))
        feat_values = rng.normal(size=(20, 4))
        cfg = self.make_cfg(4, 6, n_out=5, k=3, seed=14)
        perm = rng.permutation(20)
        s1, f1 = sg_layer(PointCloud(coords), Tensor(feat_values), cfg)
        s2, f2 = sg_layer(PointCloud(coords[perm]), Tensor(feat_values[perm]), cfg)
        k1 = np.lexsort((s1.coords[:, 2], s1.coords[:, 1], s1.coords[:, 0]))
        k2 = np.lexsort((s2.coords[:, 2], s2.coords[:, 1], s2.coords[:, 0]))
        assert np.abs(s1.coords[k1] - s2.coords[k2]).max() <= 1e-12
        assert np.abs(f1.values[k1] - f2.values[k2]).max() <= 1e-8

    def test_feature_row_count_must_match(self):
        rng = np.random.default_rng(15)
        cloud = PointCloud(rng.normal(size=(6, 3)))
        cfg = self.make_cfg(4, 5, n_out=3, k=2, seed=16)
        with pytest.raises(ad.ShapeError):
            sg_layer(cloud, Tensor(rng.normal(size=(7, 4))), cfg)


class TestAugment:
    def test_all_disabled_is_identity(self):
        rng = np.random.default_rng(17)
        cloud = PointCloud(rng.normal(size=(16, 3)))
        cfg = AugmentConfig(scale=False, translate=False, dropout=False)
        out = augment(cloud, rng, cfg)
        assert np.array_equal(out.coords, cloud.coords)

    def test_forced_scale_transforms_normals_by_inverse_transpose(self):
        normals = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0] / np.sqrt(2)])
        cloud = PointCloud(np.zeros((2, 3)), normals=normals)
        cfg = AugmentConfig(
            translate=False, dropout=False, fixed_scale=(2.0, 1.0, 1.0)
        )
        out = augment(cloud, np.random.default_rng(18), cfg)
        assert np.abs(out.normals[0] - [1.0, 0.0, 0.0]).max() <= 1e-12
        expected = np.array([0.5, 1.0, 0.0])
        expected /= np.linalg.norm(expected)
        assert np.abs(out.normals[1] - expected).max() <= 1e-12

    def test_forced_scale_doubles_x(self):
        cloud = PointCloud([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        cfg = AugmentConfig(
            translate=False, dropout=False, fixed_scale=(2.0, 1.0, 1.0)
        )
        out = augment(cloud, np.random.default_rng(19), cfg)
        assert np.array_equal(out.coords[:, 0], [2.0, 8.0])
        assert np.array_equal(out.coords[:, 1:], cloud.coords[:, 1:])

    def test_dropout_keeps_n_fixed_with_fill_copies(self):
        rng = np.random.default_rng(20)
        cloud = PointCloud(rng.normal(size=(1024, 3)))
        cfg = AugmentConfig(
            scale=False, translate=False, fixed_dropout_ratio=0.5
        )
        out = augment(cloud, rng, cfg)
        assert out.n == 1024
        unchanged = (out.coords == cloud.coords).all(axis=1)
        assert unchanged.sum() == 512
        fill = out.coords[~unchanged][0]
        assert (out.coords[~unchanged] == fill).all()

    def test_translation_bounds(self):
        rng = np.random.default_rng(21)
        cloud = PointCloud(np.zeros((4, 3)))
        cfg = AugmentConfig(scale=False, dropout=False)
        out = augment(cloud, rng, cfg)
        assert (np.abs(out.coords) <= 0.2).all()


class TestCanonicalRank:
    def test_rank_is_lexicographic_position(self):
        coords = np.array([[1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]])
        rank = canonical_rank(coords)
        assert rank.tolist() == [2, 1, 0]
