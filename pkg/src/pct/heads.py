"""Task decoders (classification, part segmentation, normal estimation),
training losses and evaluation metrics.

All heads are deterministic in inference mode (dropout off). Decoder
hidden widths default to (320, 256); see the package README for how these
were fitted against the reference parameter budgets.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LBR, LBRD, Linear, Module


class ValidationError(ValueError):
    pass


DECODER_WIDTHS = (320, 256)


class ClassificationHead(Module):
    """LBRD -> LBRD -> Linear on the global feature; both dropouts p=0.5."""

    def __init__(self, d_o, n_classes, rng, widths=DECODER_WIDTHS):
        w1, w2 = widths
        self.n_classes = n_classes
        self.lbrd1 = LBRD(2 * d_o, w1, rng, p=0.5)
        self.lbrd2 = LBRD(w1, w2, rng, p=0.5)
        self.out = Linear(w2, n_classes, rng)

    def forward(self, f_g: Tensor) -> Tensor:
        return self.out(self.lbrd2(self.lbrd1(f_g)))


class SegmentationHead(Module):
    """Pointwise decoder over concat(F_o row, F_g, category embedding).

    Dropout is applied only on the first LBR. The category embedding is a
    learned 64-wide row per category (a linear map of the one-hot vector).
    """

    def __init__(self, d_o, n_parts, n_categories, rng, widths=DECODER_WIDTHS):
        from .layers import init_linear_weight

        w1, w2 = widths
        self.n_parts = n_parts
        self.n_categories = n_categories
        self.category_embedding = Tensor(
            init_linear_weight(rng, n_categories, 64), requires_grad=True
        )
        self.lbrd = LBRD(3 * d_o + 64, w1, rng, p=0.5)
        self.lbr = LBR(w1, w2, rng)
        self.out = Linear(w2, n_parts, rng)

    def forward_batch(self, f_o_stack, segment_sizes, f_g, categories) -> Tensor:
        categories = np.asarray(categories, dtype=np.intp)
        if (categories < 0).any() or (categories >= self.n_categories).any():
            raise ValidationError(
                f"category index out of range [0, {self.n_categories})"
            )
        per_point = np.repeat(np.arange(len(segment_sizes)), segment_sizes)
        f_g_rows = ad.gather_rows(f_g, per_point)
        cat_rows = ad.gather_rows(self.category_embedding, categories[per_point])
        x = ad.concat([f_o_stack, f_g_rows, cat_rows], axis=1)
        return self.out(self.lbr(self.lbrd(x)))


class NormalsHead(Module):
    """Segmentation architecture with 3 outputs, no category embedding."""

    def __init__(self, d_o, rng, widths=DECODER_WIDTHS):
        w1, w2 = widths
        self.lbrd = LBRD(3 * d_o, w1, rng, p=0.5)
        self.lbr = LBR(w1, w2, rng)
        self.out = Linear(w2, 3, rng)

    def forward_batch(self, f_o_stack, segment_sizes, f_g) -> Tensor:
        per_point = np.repeat(np.arange(len(segment_sizes)), segment_sizes)
        f_g_rows = ad.gather_rows(f_g, per_point)
        x = ad.concat([f_o_stack, f_g_rows], axis=1)
        return self.out(self.lbr(self.lbrd(x)))


def unit_normals(raw: np.ndarray):
    """Row-normalize predicted 3-vectors at evaluation time.

    Zero rows cannot be normalized: they become (0, 0, 1) and are flagged.
    Returns (unit normals, boolean flags of guarded rows).
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1)
    flagged = norms == 0.0
    safe = np.where(flagged, 1.0, norms)
    unit = raw / safe[:, None]
    unit[flagged] = (0.0, 0.0, 1.0)
    return unit, flagged


# -- losses ---------------------------------------------------------------------


def soft_cross_entropy(scores: Tensor, labels, epsilon: float = 0.2) -> Tensor:
    """Label-smoothed cross entropy, averaged over the batch.

    Target = (1 - epsilon) on the true class plus epsilon/C uniformly over
    all classes (the true class included).
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    labels = np.asarray(labels, dtype=np.intp)
    b, c = scores.shape
    target = np.full((b, c), epsilon / c)
    target[np.arange(b), labels] += 1.0 - epsilon
    logp = ad.log_softmax(scores, axis=1)
    return ad.mul(ad.tsum(ad.mul(logp, target)), -1.0 / b)


def normal_loss(pred: Tensor, gt_normals: np.ndarray) -> Tensor:
    """mean(1 - <pred_unit, gt>) with a differentiable row normalization."""
    sq = ad.tsum(ad.mul(pred, pred), axis=1, keepdims=True)
    unit = ad.div(pred, ad.sqrt(ad.add(sq, 1e-12)))
    dots = ad.tsum(ad.mul(unit, np.asarray(gt_normals, dtype=np.float64)), axis=1)
    return ad.sub(1.0, ad.tmean(dots))


# -- metrics --------------------------------------------------------------------


def avg_cosine_error(pred_normals, gt_normals, unsigned=False) -> float:
    """Mean over points of (1 - <pred, gt>); both inputs unit-normalized.

    ``unsigned`` treats n and -n as equivalent (1 - |<pred, gt>|).
    """
    pred = np.asarray(pred_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    dots = (pred * gt).sum(axis=1)
    if unsigned:
        dots = np.abs(dots)
    return float((1.0 - dots).mean())


def part_iou(pred_labels, gt_labels, part_set) -> float:
    """Mean IoU over the category's parts for one shape.

    A part absent from both prediction and ground truth contributes 1.0.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    part_set = list(part_set)
    for name, arr in (("pred", pred), ("gt", gt)):
        bad = ~np.isin(arr, part_set)
        if bad.any():
            raise ValidationError(
                f"{name} labels {sorted(set(arr[bad].tolist()))} outside part set {part_set}"
            )
    ious = []
    for part in part_set:
        p = pred == part
        g = gt == part
        union = (p | g).sum()
        ious.append(1.0 if union == 0 else (p & g).sum() / union)
    return float(np.mean(ious))


def mean_part_iou(shapes):
    """shapes: iterable of (pred_labels, gt_labels, part_set).

    Returns (per-shape IoU list, part-average IoU over shapes).
    """
    per_shape = [part_iou(p, g, s) for p, g, s in shapes]
    return per_shape, float(np.mean(per_shape))


def multi_scale_eval(score_fn, cloud, scales=None) -> np.ndarray:
    """Average the per-scale softmax class probabilities of a classifier.

    ``score_fn`` maps a PointCloud to a raw score vector. Default scales
    run 0.7 .. 1.4 in steps of 0.1.
    """
    from .geometry import PointCloud

    if scales is None:
        scales = np.arange(0.7, 1.45, 0.1)
    probs = []
    for s in scales:
        scaled = PointCloud(
            cloud.coords * s, cloud.normals, cloud.labels, cloud.category
        )
        scores = np.asarray(score_fn(scaled), dtype=np.float64).ravel()
        e = np.exp(scores - scores.max())
        probs.append(e / e.sum())
    return np.mean(probs, axis=0)
