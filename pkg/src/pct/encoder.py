"""Input embeddings, the stacked-attention encoder and global pooling.

Two embeddings exist: a pointwise embedding (two cascaded LBRs on raw
coordinates) used by the NPCT/SPCT variants, and a neighbor embedding
(two LBRs plus a schedule of sample-and-group stages) used by full PCT.
The encoder itself stacks four width-preserving attention layers, concats
their outputs along channels and applies one bias-free linear map.

Batched forwards stack all clouds' point rows into one matrix so that
BatchNorm statistics are taken over the combined batch x points axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .attention import AttentionLayer
from .autodiff import Tensor
from .geometry import PointCloud, farthest_point_sample, knn
from .layers import LBR, Module, init_linear_weight


# (n_out, k, channels); n_out=None keeps the current point count (dense tasks)
CLS_SG_SCHEDULE = ((512, 32, 128), (256, 32, 256))
DENSE_SG_SCHEDULE = ((None, 32, 128), (None, 32, 256))


@dataclass
class EncoderConfig:
    """Architecture knobs for one encoder.

    variant "PCT" uses the neighbor embedding with ``sg_schedule``; the
    attention width is then the last schedule stage's channel count.
    NPCT/SPCT use the pointwise embedding at width ``d_e``. ``three_stage``
    appends a third SG stage (same n_out, k=32, doubled channels).
    """

    variant: str = "PCT"
    d_e: int = 128
    n_attention_layers: int = 4
    d_o: int = 1024
    sg_schedule: tuple = CLS_SG_SCHEDULE
    three_stage: bool = False

    def __post_init__(self):
        if self.variant not in ("NPCT", "SPCT", "PCT"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.three_stage:
            if self.variant != "PCT":
                raise ValueError("three_stage applies to the PCT variant only")
            if len(self.sg_schedule) == 2:
                n_out, _, ch = self.sg_schedule[-1]
                self.sg_schedule = tuple(self.sg_schedule) + ((n_out, 32, 2 * ch),)

    @property
    def attention_width(self) -> int:
        if self.variant == "PCT":
            return self.sg_schedule[-1][2]
        return self.d_e

    @property
    def attention_variant(self) -> str:
        return "SA" if self.variant == "NPCT" else "OA"


class PointEmbed(Module):
    """Two cascaded LBRs applied pointwise with shared weights (3 -> d_e)."""

    def __init__(self, d_e, rng):
        self.lbr1 = LBR(3, d_e, rng)
        self.lbr2 = LBR(d_e, d_e, rng)

    def forward(self, coords: Tensor) -> Tensor:
        return self.lbr2(self.lbr1(coords))

    def forward_batch(self, clouds: List[PointCloud]):
        stack = Tensor(np.concatenate([c.coords for c in clouds], axis=0))
        sizes = [c.n for c in clouds]
        return list(clouds), self.forward(stack), sizes


class SgStage(Module):
    """Weights of one sample-and-group stage inside the neighbor embedding."""

    def __init__(self, d_in, channels, rng, n_out, k):
        self.n_out = n_out
        self.k = k
        self.lbr1 = LBR(2 * d_in, channels, rng)
        self.lbr2 = LBR(channels, channels, rng)


class NeighborEmbed(Module):
    """Two pointwise LBRs (3 -> 64 -> 64) followed by the SG schedule.

    Each SG stage re-runs FPS and kNN on its own input cloud (the previous
    stage's output).
    """

    def __init__(self, cfg: EncoderConfig, rng):
        self.lbr1 = LBR(3, 64, rng)
        self.lbr2 = LBR(64, 64, rng)
        stages = []
        d_in = 64
        for n_out, k, channels in cfg.sg_schedule:
            stages.append(SgStage(d_in, channels, rng, n_out, k))
            d_in = channels
        self.stages = stages

    def forward_batch(self, clouds: List[PointCloud]):
        stack = Tensor(np.concatenate([c.coords for c in clouds], axis=0))
        feats = self.lbr2(self.lbr1(stack))
        for stage in self.stages:
            clouds, feats = self._run_stage(stage, clouds, feats)
        return list(clouds), feats, [c.n for c in clouds]

    def _run_stage(self, stage: SgStage, clouds, feats: Tensor):
        sample_global, nbr_global, new_clouds = [], [], []
        offset = 0
        for cloud in clouds:
            n_out = stage.n_out if stage.n_out is not None else cloud.n
            s = farthest_point_sample(cloud, n_out)
            nb = knn(cloud, cloud.coords[s], stage.k)
            sample_global.append(s + offset)
            nbr_global.append(nb + offset)
            new_clouds.append(cloud.subset(s))
            offset += cloud.n
        sample_idx = np.concatenate(sample_global)
        nbr_idx = np.concatenate(nbr_global, axis=0)

        center = ad.gather_rows(feats, np.repeat(sample_idx, stage.k))
        neighbor = ad.gather_rows(feats, nbr_idx.ravel())
        grouped = ad.concat([ad.sub(neighbor, center), center], axis=1)
        h = stage.lbr2(stage.lbr1(grouped))
        pooled = ad.tmax(
            ad.reshape(h, (len(sample_idx), stage.k, h.shape[1])), axis=1
        )
        return new_clouds, pooled


class Encoder(Module):
    """Stacked attention layers with channelwise concatenation and one
    bias-free linear output map (4 d_e -> d_o)."""

    def __init__(self, cfg: EncoderConfig, rng):
        d_e = cfg.attention_width
        self.d_o = cfg.d_o
        self.layers = [
            AttentionLayer(d_e, rng, variant=cfg.attention_variant)
            for _ in range(cfg.n_attention_layers)
        ]
        self.w_o = Tensor(
            init_linear_weight(rng, cfg.n_attention_layers * d_e, cfg.d_o),
            requires_grad=True,
        )

    def forward(self, f_e: Tensor) -> Tensor:
        return self.forward_batch(f_e, [f_e.shape[0]])

    def forward_batch(self, stack: Tensor, segment_sizes) -> Tensor:
        outs = []
        cur = stack
        for layer in self.layers:
            cur = layer.forward_batch(cur, segment_sizes)
            outs.append(cur)
        return ad.matmul(ad.concat(outs, axis=1), self.w_o)


def encode(f_e: Tensor, layers, w_o: Tensor) -> Tensor:
    """Functional form of the attention stack for a single cloud."""
    outs = []
    cur = f_e
    for layer in layers:
        cur = layer.forward(cur)
        outs.append(cur)
    return ad.matmul(ad.concat(outs, axis=1), w_o)


def global_feature(f_o: Tensor) -> Tensor:
    """concat(columnwise max, columnwise mean) of one cloud's features."""
    return ad.concat(
        [ad.tmax(f_o, axis=0, keepdims=True), ad.tmean(f_o, axis=0, keepdims=True)],
        axis=1,
    )


def global_feature_batch(f_o_stack: Tensor, segment_sizes) -> Tensor:
    """Per-cloud global features stacked into a (B, 2 d_o) matrix."""
    rows = []
    offset = 0
    for n in segment_sizes:
        seg = ad.gather_rows(f_o_stack, np.arange(offset, offset + n))
        rows.append(global_feature(seg))
        offset += n
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


class Backbone(Module):
    """Embedding plus encoder; the shared trunk of every task model."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        if cfg.variant == "PCT":
            self.embed = NeighborEmbed(cfg, rng)
        else:
            self.embed = PointEmbed(cfg.d_e, rng)
        self.encoder = Encoder(cfg, rng)

    def forward_batch(self, clouds: List[PointCloud]):
        """Returns (output clouds, F_o row stack, segment sizes, F_g batch)."""
        clouds, feats, sizes = self.embed.forward_batch(clouds)
        f_o = self.encoder.forward_batch(feats, sizes)
        f_g = global_feature_batch(f_o, sizes)
        return clouds, f_o, sizes, f_g
