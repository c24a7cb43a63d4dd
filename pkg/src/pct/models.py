"""Task models: a shared backbone (embedding + attention encoder) wired to
one of the three task heads, for each encoder variant (NPCT/SPCT/PCT)."""

from __future__ import annotations

from typing import List

import numpy as np

from .autodiff import Tensor
from .encoder import (
    Backbone,
    CLS_SG_SCHEDULE,
    DENSE_SG_SCHEDULE,
    EncoderConfig,
)
from .geometry import PointCloud
from .heads import (
    DECODER_WIDTHS,
    ClassificationHead,
    NormalsHead,
    SegmentationHead,
    unit_normals,
)
from .layers import Module


class PointCloudClassifier(Module):
    def __init__(self, cfg: EncoderConfig, n_classes, rng, widths=DECODER_WIDTHS):
        self.backbone = Backbone(cfg, rng)
        self.head = ClassificationHead(cfg.d_o, n_classes, rng, widths)

    def forward_batch(self, clouds: List[PointCloud]) -> Tensor:
        _, _, _, f_g = self.backbone.forward_batch(clouds)
        return self.head(f_g)

    def predict_scores(self, cloud: PointCloud) -> np.ndarray:
        """Inference-mode raw scores for one cloud."""
        return self.forward_batch([cloud]).values.ravel()


class PointCloudSegmenter(Module):
    def __init__(self, cfg: EncoderConfig, n_parts, n_categories, rng,
                 widths=DECODER_WIDTHS):
        self.backbone = Backbone(cfg, rng)
        self.head = SegmentationHead(cfg.d_o, n_parts, n_categories, rng, widths)

    def forward_batch(self, clouds: List[PointCloud]):
        """Returns (output clouds, per-point score stack, segment sizes)."""
        out_clouds, f_o, sizes, f_g = self.backbone.forward_batch(clouds)
        categories = [c.category for c in clouds]
        scores = self.head.forward_batch(f_o, sizes, f_g, categories)
        return out_clouds, scores, sizes


class PointCloudNormalEstimator(Module):
    def __init__(self, cfg: EncoderConfig, rng, widths=DECODER_WIDTHS):
        self.backbone = Backbone(cfg, rng)
        self.head = NormalsHead(cfg.d_o, rng, widths)

    def forward_batch(self, clouds: List[PointCloud]):
        """Returns (output clouds, raw per-point 3-vector stack, sizes)."""
        out_clouds, f_o, sizes, f_g = self.backbone.forward_batch(clouds)
        return out_clouds, self.head.forward_batch(f_o, sizes, f_g), sizes

    def predict_normals(self, cloud: PointCloud):
        """Inference-mode unit normals plus flags for zero-output rows."""
        _, raw, _ = self.forward_batch([cloud])
        return unit_normals(raw.values)


def scaled_cls_schedule(n_points: int) -> tuple:
    """Classification SG schedule shrunk proportionally for small clouds.

    Matches the reference schedule (512, 256 samples, k=32) at 1024 points
    and halves twice at any size. The neighborhood size shrinks with the
    cloud so small clouds keep a comparable local radius.
    """
    n1 = max(1, n_points // 2)
    n2 = max(1, n_points // 4)
    k = max(1, min(32, n_points // 16, n2))
    return ((n1, k, 128), (n2, k, 256))


def make_encoder_config(variant: str, task: str, n_points: int = 1024,
                        d_e: int = 128, d_o: int = 1024,
                        three_stage: bool = False) -> EncoderConfig:
    """EncoderConfig for a (variant, task) pair at a given cloud size."""
    variant = variant.upper()
    if variant == "PCT3L":
        variant, three_stage = "PCT", True
    if variant != "PCT":
        return EncoderConfig(variant=variant, d_e=d_e, d_o=d_o)
    if task == "classify":
        schedule = (
            CLS_SG_SCHEDULE if n_points >= 1024 else scaled_cls_schedule(n_points)
        )
    else:
        k = max(1, min(32, n_points if n_points >= 1024 else n_points // 16))
        schedule = tuple((None, k, ch) for _, _, ch in DENSE_SG_SCHEDULE)
    return EncoderConfig(
        variant="PCT", d_e=d_e, d_o=d_o, sg_schedule=schedule,
        three_stage=three_stage,
    )


def build_model(variant: str, task: str, rng, n_classes=8, n_parts=4,
                n_categories=8, n_points=1024, d_o=1024,
                widths=DECODER_WIDTHS, three_stage=False) -> Module:
    cfg = make_encoder_config(variant, task, n_points=n_points, d_o=d_o,
                              three_stage=three_stage)
    if task == "classify":
        return PointCloudClassifier(cfg, n_classes, rng, widths)
    if task == "segment":
        return PointCloudSegmenter(cfg, n_parts, n_categories, rng, widths)
    if task == "normals":
        return PointCloudNormalEstimator(cfg, rng, widths)
    raise ValueError(f"unknown task {task!r}")
