"""Non-differentiable geometric kernels: farthest point sampling,
k-nearest-neighbor search, the sample-and-group aggregation layer and
input augmentation.

All kernels are pure functions of their inputs and use brute-force
O(N^2) / O(N*m) algorithms; at desk scale (N <= 4096) spatial indexes
are unnecessary. Tie-breaking everywhere uses the canonical rank of a
point: its position in lexicographic (x, y, z) coordinate order, not its
input index. This makes the kernels set functions of the input cloud
(general position assumed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LBR


class CountError(ValueError):
    """Requested more samples/neighbors than points available."""


@dataclass
class PointCloud:
    """N points with per-point attributes.

    coords: (N, 3) finite coordinates in model units.
    normals: optional (N, 3) unit vectors.
    labels: optional (N,) integer per-point labels.
    category: optional integer object category.
    """

    coords: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    category: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(self.coords).all():
            raise ValueError("coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.coords.shape:
                raise ValueError("normals must match coords shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length within 1e-6")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError("labels must be one integer per point")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            coords=self.coords[idx],
            normals=None if self.normals is None else self.normals[idx],
            labels=None if self.labels is None else self.labels[idx],
            category=self.category,
        )


def canonical_rank(coords: np.ndarray) -> np.ndarray:
    """rank[i] = position of point i in lexicographic (x, y, z) order."""
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    rank = np.empty(len(coords), dtype=np.intp)
    rank[order] = np.arange(len(coords))
    return rank


def farthest_point_sample(cloud: PointCloud, m: int) -> np.ndarray:
    """Greedy farthest point sampling; returns indices in selection order.

    Seed: the point maximizing distance from the centroid, distance ties
    broken toward the lexicographically smallest coordinates. Each later
    step adds the point maximizing min distance to the selected set, ties
    again broken by smaller canonical rank.
    """
    coords = cloud.coords
    n = cloud.n
    if not 1 <= m <= n:
        raise CountError(f"cannot sample {m} points from a cloud of {n}")
    rank = canonical_rank(coords)

    centroid = coords.mean(axis=0)
    d0 = np.linalg.norm(coords - centroid, axis=1)
    start = _argmax_with_rank_tiebreak(d0, rank)

    selected = np.empty(m, dtype=np.intp)
    selected[0] = start
    mind = np.linalg.norm(coords - coords[start], axis=1)
    for i in range(1, m):
        nxt = _argmax_with_rank_tiebreak(mind, rank)
        selected[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(coords - coords[nxt], axis=1))
    return selected


def _argmax_with_rank_tiebreak(values: np.ndarray, rank: np.ndarray) -> int:
    best = values.max()
    ties = np.flatnonzero(values == best)
    return int(ties[np.argmin(rank[ties])])


def knn(cloud: PointCloud, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest cloud points per query, sorted by
    (distance, canonical rank). A query coinciding with a cloud point
    includes that point at distance 0."""
    queries = np.asarray(queries, dtype=np.float64)
    if k > cloud.n:
        raise CountError(f"k={k} exceeds cloud size {cloud.n}")
    rank = canonical_rank(cloud.coords)
    diff = queries[:, None, :] - cloud.coords[None, :, :]
    dists = np.sqrt((diff * diff).sum(axis=2))
    out = np.empty((len(queries), k), dtype=np.intp)
    for i in range(len(queries)):
        out[i] = np.lexsort((rank, dists[i]))[:k]
    return out


@dataclass
class SgLayerConfig:
    """One sample-and-group stage: FPS to n_out points, kNN grouping with
    k neighbors, then two LBR blocks and a max-pool over each group."""

    n_out: int
    k: int
    lbr1: LBR
    lbr2: LBR


def sg_layer(cloud: PointCloud, features: Tensor, cfg: SgLayerConfig):
    """Sample-and-group aggregation.

    For each sampled point p, the rows F(q) - F(p) over its k nearest
    neighbors q are stacked and concatenated with F(p) repeated k times,
    pushed through LBR(LBR(.)) and max-pooled over the k group rows.

    Returns (sampled cloud, aggregated features Tensor[n_out x d_out]).
    """
    if features.shape[0] != cloud.n:
        raise ad.ShapeError(
            f"feature rows {features.shape[0]} != point count {cloud.n}"
        )
    sample_idx = farthest_point_sample(cloud, cfg.n_out)
    nbr_idx = knn(cloud, cloud.coords[sample_idx], cfg.k)

    center = ad.gather_rows(features, np.repeat(sample_idx, cfg.k))
    neighbor = ad.gather_rows(features, nbr_idx.ravel())
    delta = ad.sub(neighbor, center)
    grouped = ad.concat([delta, center], axis=1)

    h = cfg.lbr2(cfg.lbr1(grouped))
    d_out = h.shape[1]
    pooled = ad.tmax(ad.reshape(h, (cfg.n_out, cfg.k, d_out)), axis=1)
    return cloud.subset(sample_idx), pooled


@dataclass
class AugmentConfig:
    """Training-time augmentation: per-axis anisotropic scale, global
    translation, then input dropout that keeps N fixed by replacing
    dropped points with copies of the first kept point.

    The fixed_* fields force specific draws (used by tests); None means
    sample from the stated range.
    """

    scale: bool = True
    translate: bool = True
    dropout: bool = True
    scale_range: tuple = (0.67, 1.5)
    translate_range: tuple = (-0.2, 0.2)
    max_dropout_ratio: float = 0.2
    fixed_scale: Optional[tuple] = None
    fixed_translation: Optional[tuple] = None
    fixed_dropout_ratio: Optional[float] = None


def augment(cloud: PointCloud, rng: np.random.Generator, cfg: AugmentConfig) -> PointCloud:
    coords = cloud.coords.copy()
    normals = None if cloud.normals is None else cloud.normals.copy()
    labels = None if cloud.labels is None else cloud.labels.copy()

    if cfg.scale:
        s = (
            np.asarray(cfg.fixed_scale, dtype=np.float64)
            if cfg.fixed_scale is not None
            else rng.uniform(*cfg.scale_range, size=3)
        )
        coords = coords * s
        if normals is not None:
            # inverse-transpose rule for anisotropic scaling, renormalized
            normals = normals / s
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    if cfg.translate:
        t = (
            np.asarray(cfg.fixed_translation, dtype=np.float64)
            if cfg.fixed_translation is not None
            else rng.uniform(*cfg.translate_range, size=3)
        )
        coords = coords + t

    if cfg.dropout:
        ratio = (
            cfg.fixed_dropout_ratio
            if cfg.fixed_dropout_ratio is not None
            else rng.uniform(0.0, cfg.max_dropout_ratio)
        )
        n = len(coords)
        n_drop = int(np.floor(ratio * n))
        if n_drop > 0:
            dropped = rng.choice(n, size=n_drop, replace=False)
            keep_mask = np.ones(n, dtype=bool)
            keep_mask[dropped] = False
            if not keep_mask.any():
                raise ValueError("dropout would remove every point")
            fill = int(np.flatnonzero(keep_mask)[0])
            coords[dropped] = coords[fill]
            if normals is not None:
                normals[dropped] = normals[fill]
            if labels is not None:
                labels[dropped] = labels[fill]

    return PointCloud(coords, normals, labels, cloud.category)
