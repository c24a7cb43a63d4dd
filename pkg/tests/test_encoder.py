"""Tests for point/neighbor embeddings, the stacked-attention encoder and
global-feature pooling."""

import numpy as np
import pytest

import pct.autodiff as ad
from pct.autodiff import Tensor
from pct.encoder import (
    Backbone,
    CLS_SG_SCHEDULE,
    Encoder,
    EncoderConfig,
    NeighborEmbed,
    PointEmbed,
    encode,
    global_feature,
    global_feature_batch,
)
from pct.geometry import PointCloud


def literal_encode_oracle(f, layers, w_o):
    """Chain the attention layers one by one and apply the output map."""
    outs = []
    cur = f
    for layer in layers:
        cur = layer(Tensor(cur)).values
        outs.append(cur)
    return np.concatenate(outs, axis=1) @ w_o


class TestPointEmbed:
    def test_identical_points_identical_rows(self):
        rng = np.random.default_rng(0)
        embed = PointEmbed(16, rng).eval()
        coords = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        out = embed(Tensor(coords)).values
        assert np.array_equal(out[0], out[1])

    def test_permutation_equivariance_exact(self):
        rng = np.random.default_rng(1)
        embed = PointEmbed(16, rng).eval()
        coords = rng.normal(size=(9, 3))
        perm = rng.permutation(9)
        out = embed(Tensor(coords)).values
        assert np.array_equal(embed(Tensor(coords[perm])).values, out[perm])

    def test_matches_double_lbr_composition(self):
        rng = np.random.default_rng(2)
        embed = PointEmbed(16, rng).eval()
        coords = rng.normal(size=(7, 3))
        expected = embed.lbr2(embed.lbr1(Tensor(coords))).values
        assert np.array_equal(embed(Tensor(coords)).values, expected)


class TestNeighborEmbed:
    def test_dense_schedule_preserves_point_count(self):
        rng = np.random.default_rng(3)
        cfg = EncoderConfig(
            variant="PCT", d_o=32,
            sg_schedule=((None, 8, 16), (None, 8, 32)),
        )
        embed = NeighborEmbed(cfg, rng).eval()
        clouds = [PointCloud(rng.normal(size=(128, 3)))]
        out_clouds, feats, sizes = embed.forward_batch(clouds)
        assert out_clouds[0].n == 128
        assert feats.shape == (128, 32)
        assert sizes == [128]

    def test_classification_schedule_shrinks_to_256_points_256_channels(self):
        rng = np.random.default_rng(4)
        cfg = EncoderConfig(variant="PCT", sg_schedule=CLS_SG_SCHEDULE)
        embed = NeighborEmbed(cfg, rng).eval()
        clouds = [PointCloud(rng.normal(size=(1024, 3)))]
        out_clouds, feats, _ = embed.forward_batch(clouds)
        assert out_clouds[0].n == 256
        assert feats.shape == (256, 256)

    def test_single_stage_k1_reduces_to_pointwise_pipeline(self):
        rng = np.random.default_rng(5)
        cfg = EncoderConfig(
            variant="PCT", d_o=16, sg_schedule=((6, 1, 12),)
        )
        embed = NeighborEmbed(cfg, rng).eval()
        cloud = PointCloud(rng.normal(size=(6, 3)))
        _, feats, _ = embed.forward_batch([cloud])
        # k=1 neighborhoods are the sampled points themselves: delta = 0
        base = embed.lbr2(embed.lbr1(Tensor(cloud.coords))).values
        from pct.geometry import farthest_point_sample

        s = farthest_point_sample(cloud, 6)
        stage = embed.stages[0]
        grouped = Tensor(np.concatenate(
            [np.zeros_like(base[s]), base[s]], axis=1
        ))
        expected = stage.lbr2(stage.lbr1(grouped)).values
        assert np.abs(feats.values - expected).max() <= 1e-10

    def test_schedule_exceeding_cloud_size_raises(self):
        rng = np.random.default_rng(6)
        cfg = EncoderConfig(variant="PCT", sg_schedule=((50, 4, 16),))
        embed = NeighborEmbed(cfg, rng).eval()
        from pct.geometry import CountError

        with pytest.raises(CountError):
            embed.forward_batch([PointCloud(rng.normal(size=(10, 3)))])


class TestEncode:
    def make_layers(self, d_e, variant, seed, n_layers=4):
        rng = np.random.default_rng(seed)
        from pct.attention import AttentionLayer

        layers = [AttentionLayer(d_e, rng, variant=variant).eval()
                  for _ in range(n_layers)]
        w_o = Tensor(rng.normal(size=(n_layers * d_e, 24)))
        return layers, w_o

    def test_frozen_identity_configuration(self):
        # zero QKV and zero BN scale/shift make each OA layer the identity,
        # so every concatenated block equals the embedding
        layers, _ = self.make_layers(8, "OA", seed=7)
        for layer in layers:
            layer.w_q.values[:] = 0.0
            layer.w_k.values[:] = 0.0
            layer.w_v.values[:] = 0.0
            layer.lbr.bn.scale.values[:] = 0.0
        rng = np.random.default_rng(8)
        f_e = rng.normal(size=(5, 8))
        w_o = Tensor(np.eye(32))
        out = encode(Tensor(f_e), layers, w_o).values
        assert np.abs(out - np.tile(f_e, (1, 4))).max() <= 1e-12

    def test_permutation_equivariance(self):
        layers, w_o = self.make_layers(8, "OA", seed=9)
        rng = np.random.default_rng(10)
        f_e = rng.normal(size=(11, 8))
        perm = rng.permutation(11)
        out = encode(Tensor(f_e), layers, w_o).values
        out_perm = encode(Tensor(f_e[perm]), layers, w_o).values
        assert np.abs(out_perm - out[perm]).max() <= 1e-8

    def test_matches_literal_oracle(self):
        layers, w_o = self.make_layers(16, "OA", seed=11)
        rng = np.random.default_rng(12)
        f_e = rng.normal(size=(8, 16))
        got = encode(Tensor(f_e), layers, w_o).values
        expected = literal_encode_oracle(f_e, layers, w_o.values)
        assert np.abs(got - expected).max() <= 1e-10

    def test_output_width_is_d_o_for_all_variants(self):
        rng = np.random.default_rng(13)
        for variant in ("NPCT", "SPCT"):
            cfg = EncoderConfig(variant=variant, d_e=8, d_o=24)
            enc = Encoder(cfg, rng).eval()
            out = enc(Tensor(rng.normal(size=(6, 8))))
            assert out.shape == (6, 24)


class TestGlobalFeature:
    def test_single_point(self):
        row = np.array([[1.0, -2.0, 3.0]])
        out = global_feature(Tensor(row)).values
        assert np.array_equal(out, [[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(14)
        f = rng.normal(size=(10, 6))
        perm = rng.permutation(10)
        a = global_feature(Tensor(f)).values
        b = global_feature(Tensor(f[perm])).values
        assert np.abs(a - b).max() <= 1e-8

    def test_hand_computed_pooling(self):
        f = np.array([[1.0, 10.0], [3.0, 4.0], [2.0, 1.0]])
        out = global_feature(Tensor(f)).values
        assert np.array_equal(out, [[3.0, 10.0, 2.0, 5.0]])

    def test_batch_form_matches_per_cloud(self):
        rng = np.random.default_rng(15)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(7, 6))
        stacked = Tensor(np.concatenate([a, b], axis=0))
        batch = global_feature_batch(stacked, [4, 7]).values
        assert np.abs(batch[0] - global_feature(Tensor(a)).values[0]).max() <= 1e-12
        assert np.abs(batch[1] - global_feature(Tensor(b)).values[0]).max() <= 1e-12


class TestEncoderConfig:
    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            EncoderConfig(variant="XPCT")

    def test_three_stage_appends_doubled_channels(self):
        cfg = EncoderConfig(variant="PCT", three_stage=True)
        assert len(cfg.sg_schedule) == 3
        assert cfg.sg_schedule[2] == (256, 32, 512)
        assert cfg.attention_width == 512

    def test_three_stage_requires_pct(self):
        with pytest.raises(ValueError):
            EncoderConfig(variant="SPCT", three_stage=True)

    def test_attention_variant_per_encoder_variant(self):
        assert EncoderConfig(variant="NPCT").attention_variant == "SA"
        assert EncoderConfig(variant="SPCT").attention_variant == "OA"
        assert EncoderConfig(variant="PCT").attention_variant == "OA"


class TestBackbonePipelines:
    @pytest.mark.parametrize("variant", ["NPCT", "SPCT"])
    def test_pointwise_pipeline_equivariance_and_invariance(self, variant):
        rng = np.random.default_rng(16)
        cfg = EncoderConfig(variant=variant, d_e=8, d_o=16)
        backbone = Backbone(cfg, rng).eval()
        coords = rng.normal(size=(12, 3))
        perm = rng.permutation(12)
        _, f_o, _, f_g = backbone.forward_batch([PointCloud(coords)])
        _, f_o_p, _, f_g_p = backbone.forward_batch([PointCloud(coords[perm])])
        assert np.abs(f_o_p.values - f_o.values[perm]).max() <= 1e-8
        assert np.abs(f_g_p.values - f_g.values).max() <= 1e-8

    def test_pct_pipeline_set_invariance(self):
        rng = np.random.default_rng(17)
        cfg = EncoderConfig(
            variant="PCT", d_o=16, sg_schedule=((8, 4, 8), (4, 4, 16))
        )
        backbone = Backbone(cfg, rng).eval()
        coords = rng.normal(size=(16, 3))
        perm = rng.permutation(16)
        clouds1, f_o1, _, f_g1 = backbone.forward_batch([PointCloud(coords)])
        clouds2, f_o2, _, f_g2 = backbone.forward_batch([PointCloud(coords[perm])])
        c1, c2 = clouds1[0].coords, clouds2[0].coords
        k1 = np.lexsort((c1[:, 2], c1[:, 1], c1[:, 0]))
        k2 = np.lexsort((c2[:, 2], c2[:, 1], c2[:, 0]))
        assert np.abs(c1[k1] - c2[k2]).max() <= 1e-12
        assert np.abs(f_o1.values[k1] - f_o2.values[k2]).max() <= 1e-8
        assert np.abs(f_g1.values - f_g2.values).max() <= 1e-8
