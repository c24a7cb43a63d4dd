"""Gradient-checking suites over every layer type and full model variant.

Used by the ``gradcheck`` CLI subcommand and by the acceptance tests. All
checks run with eval-mode BatchNorm on small random shapes; parameters are
perturbed coordinate-wise with central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import AttentionLayer
from .autodiff import Tensor
from .encoder import EncoderConfig
from .geometry import PointCloud
from .heads import soft_cross_entropy
from .layers import LBR
from .models import build_model


def max_param_gradcheck(loss_fn, named_params, eps=1e-5,
                        coords_per_param=2, rng=None) -> float:
    """Max relative error of analytic vs central-difference directional
    derivatives, over random unit directions of every parameter tensor.

    Directional probes keep the comparison well conditioned even where
    individual coordinate gradients are vanishingly small. ``loss_fn``
    must be deterministic and side-effect free (eval mode). The
    relative-error denominator is max(|analytic|, |numeric|, 1e-6): with
    a loss of order one, double-precision central differences cannot
    resolve directional derivatives below ~1e-12, so the floor still
    demands absolute agreement to 1e-10 at the 1e-4 threshold.

    Each probe is evaluated at three step sizes (``eps``, ``eps/100``,
    ``eps/1000``) and scored by the smallest error. ReLU and max-pool
    kinks within ``eps`` of the base point inflate only the large-step
    error, high curvature (e.g. normalizing a near-zero vector) needs
    the smallest step, and roundoff on near-zero derivatives inflates
    only the small steps; a wrong gradient fails at every step size.
    """
    rng = rng or np.random.default_rng(0)
    params = list(named_params)
    for _, p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = {
        name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
        for name, p in params
    }
    max_err = 0.0
    for name, p in params:
        base = p.values.copy()
        for _ in range(coords_per_param):
            direction = rng.normal(size=p.values.shape)
            direction /= np.linalg.norm(direction)
            a = float((analytic[name] * direction).sum())
            probe_err = np.inf
            for step in (eps, eps / 100, eps / 1000):
                p.values = base + step * direction
                f_plus = float(loss_fn().values)
                p.values = base - step * direction
                f_minus = float(loss_fn().values)
                p.values = base
                numeric = (f_plus - f_minus) / (2 * step)
                denom = max(abs(a), abs(numeric), 1e-6)
                probe_err = min(probe_err, abs(a - numeric) / denom)
            max_err = max(max_err, probe_err)
    for _, p in params:
        p.zero_grad()
    return max_err


def layer_suites(seed=0) -> dict:
    """Gradcheck each differentiable building block; returns name -> error."""
    rng = np.random.default_rng(seed)
    results = {}

    x0 = rng.normal(size=(5, 6))
    w64 = Tensor(rng.normal(size=(6, 4)))
    p54 = Tensor(rng.normal(size=(5, 4)))
    p56 = Tensor(rng.normal(size=(5, 6)))
    p6 = Tensor(rng.normal(size=6))
    p312 = Tensor(rng.normal(size=(3, 12)))
    results["matmul"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.matmul(t, w64), p54)), Tensor(x0)
    )
    results["softmax_rows"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), p56)), Tensor(x0)
    )
    results["log_softmax"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.log_softmax(t, axis=1), p56)), Tensor(x0)
    )
    results["relu"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.relu(t), p56)), Tensor(x0)
    )
    results["max_pool"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.tmax(t, axis=0), p6)), Tensor(x0)
    )
    results["mean_pool"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=0), p6)), Tensor(x0)
    )
    results["concat_gather"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(
            ad.concat([ad.gather_rows(t, [0, 0, 2]), ad.gather_rows(t, [1, 3, 4])],
                      axis=1),
            p312)),
        Tensor(x0),
    )

    lbr = LBR(6, 4, rng).eval()
    weights = Tensor(rng.normal(size=(5, 4)))
    results["lbr_eval"] = max_param_gradcheck(
        lambda: ad.tsum(ad.mul(lbr(Tensor(x0)), weights)),
        lbr.named_parameters(), coords_per_param=6, rng=rng,
    )
    results["lbr_input"] = ad.gradcheck(
        lambda t: ad.tsum(ad.mul(lbr(t), weights)), Tensor(x0)
    )

    for variant in ("SA", "OA"):
        layer = AttentionLayer(8, rng, variant=variant).eval()
        f_in = Tensor(rng.normal(size=(6, 8)))
        probe = Tensor(rng.normal(size=(6, 8)))
        results[f"{variant.lower()}_layer_params"] = max_param_gradcheck(
            lambda layer=layer, f_in=f_in, probe=probe: ad.tsum(
                ad.mul(layer(f_in), probe)),
            layer.named_parameters(), coords_per_param=4, rng=rng,
        )
        results[f"{variant.lower()}_layer_input"] = ad.gradcheck(
            lambda t, layer=layer, probe=probe: ad.tsum(ad.mul(layer(t), probe)),
            f_in,
        )
    return results


def _tiny_config(variant):
    if variant == "PCT":
        return EncoderConfig(variant="PCT", d_o=24,
                             sg_schedule=((6, 3, 8), (4, 3, 16)))
    return EncoderConfig(variant=variant, d_e=16, d_o=24)


def model_suites(seed=0, coords_per_param=2) -> dict:
    """Gradcheck each full model variant end to end (eval-mode BN)."""
    rng = np.random.default_rng(seed)
    results = {}
    cloud = PointCloud(rng.normal(size=(10, 3)))
    cloud.category = 1
    cloud.labels = rng.integers(0, 3, size=10)
    cloud.normals = None

    for variant in ("NPCT", "SPCT", "PCT"):
        model = build_model(variant, "classify", rng, n_classes=3,
                            n_points=10, d_o=24, widths=(12, 8))
        model.backbone = _rebuild_backbone(model, variant, rng)
        model.eval()

        def loss_fn(model=model):
            scores = model.forward_batch([cloud])
            return soft_cross_entropy(scores, [1], 0.1)

        results[f"{variant.lower()}_classifier"] = max_param_gradcheck(
            loss_fn, model.named_parameters(),
            coords_per_param=coords_per_param, rng=rng,
        )

    seg = build_model("PCT", "segment", rng, n_parts=3, n_categories=2,
                      n_points=10, d_o=24, widths=(12, 8))
    seg.backbone = _rebuild_backbone(seg, "PCT", rng)
    seg.eval()

    def seg_loss():
        out_clouds, scores, _ = seg.forward_batch([cloud])
        return soft_cross_entropy(scores, out_clouds[0].labels, 0.1)

    results["pct_segmenter"] = max_param_gradcheck(
        seg_loss, seg.named_parameters(),
        coords_per_param=coords_per_param, rng=rng,
    )

    nrm_cloud = PointCloud(rng.normal(size=(10, 3)))
    dirs = rng.normal(size=(10, 3))
    nrm_cloud.normals = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    est = build_model("PCT", "normals", rng, n_points=10, d_o=24, widths=(12, 8))
    est.backbone = _rebuild_backbone(est, "PCT", rng)
    est.eval()

    def nrm_loss():
        from .heads import normal_loss

        out_clouds, pred, _ = est.forward_batch([nrm_cloud])
        gt = np.concatenate([c.normals for c in out_clouds], axis=0)
        return normal_loss(pred, gt)

    results["pct_normals"] = max_param_gradcheck(
        nrm_loss, est.named_parameters(),
        coords_per_param=coords_per_param, rng=rng,
    )
    return results


def _rebuild_backbone(model, variant, rng):
    """Rebuild a model's backbone at tiny width for cheap finite differences."""
    from .encoder import Backbone

    return Backbone(_tiny_config(variant), rng)


def run_all(seed=0) -> dict:
    results = layer_suites(seed)
    results.update(model_suites(seed))
    return results
