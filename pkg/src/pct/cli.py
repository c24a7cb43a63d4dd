"""Command-line entry point.

Subcommands: gen-data, train, eval, infer, gradcheck, params,
dump-attention, bench. Option precedence is CLI flag > JSON config file
(--config) > built-in default. --seed fixes all stochasticity; the
PCT_THREADS environment variable caps numeric worker threads where the
runtime allows it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checks import run_all
from .data import DatasetConfig, SHAPE_KINDS, load_dataset, load_points, make_dataset
from .geometry import PointCloud, farthest_point_sample, knn
from .heads import multi_scale_eval, unit_normals
from .models import build_model
from .training import TrainConfig, evaluate, load_checkpoint, train


class CliError(Exception):
    pass


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _merged_options(args, defaults):
    """Precedence: CLI flag > config file > default."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            file_cfg = json.load(fh)
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in merged:
                raise CliError(f"unknown config key {key!r} in {config_path}")
            merged[key] = value
    for key in merged:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    return argparse.Namespace(**merged)


def _dataset_stats(train_clouds, test_clouds):
    clouds = train_clouds + test_clouds
    n_categories = max(c.category for c in clouds) + 1
    n_parts = 1
    for c in clouds:
        if c.labels is not None:
            n_parts = max(n_parts, int(c.labels.max()) + 1)
    n_points = clouds[0].n
    return n_categories, n_parts, n_points


def _build_from_options(opts, n_categories, n_parts, n_points):
    rng = np.random.default_rng(opts.seed)
    return build_model(
        opts.model, opts.task, rng,
        n_classes=n_categories, n_parts=n_parts, n_categories=n_categories,
        n_points=n_points, d_o=opts.d_o,
    )


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args):
    defaults = dict(out="dataset", shapes_per_class=50, points=256,
                    noise=0.0, seed=0, rotate=True, kinds=None)
    opts = _merged_options(args, defaults)
    kinds = tuple(opts.kinds.split(",")) if opts.kinds else SHAPE_KINDS
    cfg = DatasetConfig(
        out_dir=opts.out, kinds=kinds, shapes_per_class=opts.shapes_per_class,
        n_points=opts.points, noise_sigma=opts.noise, rotate=opts.rotate,
    )
    manifest = make_dataset(cfg, opts.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args):
    defaults = dict(data=None, model="pct", task="classify", epochs=100,
                    batch=16, lr=0.01, seed=0, d_o=256, out="run",
                    augment=True, deterministic=False, verbose=False)
    opts = _merged_options(args, defaults)
    if not opts.data:
        raise CliError("train requires --data pointing at a manifest (config key 'data')")
    if opts.deterministic:
        _limit_threads(1)
    train_clouds, test_clouds = load_dataset(opts.data)
    n_categories, n_parts, n_points = _dataset_stats(train_clouds, test_clouds)
    model = _build_from_options(opts, n_categories, n_parts, n_points)
    cfg = TrainConfig(
        task=opts.task, epochs=opts.epochs, batch_size=opts.batch,
        lr=opts.lr, seed=opts.seed, augment=opts.augment, out_dir=opts.out,
    )
    result = train(model, train_clouds, test_clouds, cfg, verbose=opts.verbose)
    print(f"best eval metric {result.best_metric!r} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args):
    defaults = dict(data=None, checkpoint=None, model="pct", task="classify",
                    seed=0, d_o=256, batch=16, multi_scale=False)
    opts = _merged_options(args, defaults)
    if not opts.data or not opts.checkpoint:
        raise CliError("eval requires --data and --checkpoint")
    train_clouds, test_clouds = load_dataset(opts.data)
    n_categories, n_parts, n_points = _dataset_stats(train_clouds, test_clouds)
    model = _build_from_options(opts, n_categories, n_parts, n_points)
    load_checkpoint(model, opts.checkpoint)
    model.eval()
    metric = evaluate(model, test_clouds, opts.task, opts.batch,
                      multi_scale=opts.multi_scale)
    name = {"classify": "accuracy", "segment": "pIoU",
            "normals": "avg_cosine_error"}[opts.task]
    print(f"{name}: {metric!r}")
    return 0


def cmd_infer(args):
    defaults = dict(input=None, checkpoint=None, model="pct", task="classify",
                    seed=0, d_o=256, out="predictions.csv",
                    n_classes=8, n_parts=4, n_categories=8, category=0)
    opts = _merged_options(args, defaults)
    if not opts.input or not opts.checkpoint:
        raise CliError("infer requires --input and --checkpoint")
    cloud = load_points(opts.input)
    cloud.category = opts.category
    rng = np.random.default_rng(opts.seed)
    model = build_model(opts.model, opts.task, rng, n_classes=opts.n_classes,
                        n_parts=opts.n_parts, n_categories=opts.n_categories,
                        n_points=cloud.n, d_o=opts.d_o)
    load_checkpoint(model, opts.checkpoint)
    model.eval()

    rows = []
    if opts.task == "classify":
        scores = model.predict_scores(cloud)
        pred = int(np.argmax(scores))
        print(f"predicted class: {pred}")
        for i in range(cloud.n):
            rows.append(list(cloud.coords[i]) + [pred])
    elif opts.task == "segment":
        out_clouds, scores, _ = model.forward_batch([cloud])
        pred = scores.values.argmax(axis=1)
        out = out_clouds[0]
        for i in range(out.n):
            row = list(out.coords[i]) + [int(pred[i])]
            if out.labels is not None:
                row.append(int(out.labels[i]))
            rows.append(row)
    else:
        out_clouds, raw, _ = model.forward_batch([cloud])
        unit, _ = unit_normals(raw.values)
        out = out_clouds[0]
        for i in range(out.n):
            row = list(out.coords[i]) + list(unit[i])
            if out.normals is not None:
                row += list(out.normals[i])
            rows.append(row)
    with open(opts.out, "w") as fh:
        for row in rows:
            fh.write(",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    print(f"wrote {opts.out}")
    return 0


def cmd_gradcheck(args):
    defaults = dict(seed=0, tolerance=1e-4)
    opts = _merged_options(args, defaults)
    results = run_all(opts.seed)
    worst = 0.0
    for name, err in sorted(results.items()):
        print(f"{name:28s} max rel error {err:.3e}")
        worst = max(worst, err)
    ok = worst <= opts.tolerance
    print(f"worst: {worst:.3e} ({'OK' if ok else 'FAIL'} at {opts.tolerance})")
    return 0 if ok else 1


def cmd_params(args):
    defaults = dict(model="spct", task="classify", n_classes=40, n_parts=50,
                    n_categories=16, points=1024, d_o=1024, seed=0)
    opts = _merged_options(args, defaults)
    rng = np.random.default_rng(opts.seed)
    model = build_model(opts.model, opts.task, rng, n_classes=opts.n_classes,
                        n_parts=opts.n_parts, n_categories=opts.n_categories,
                        n_points=opts.points, d_o=opts.d_o)
    per_module = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        per_module[top] = per_module.get(top, 0) + p.size
    for top, count in per_module.items():
        print(f"{top:12s} {count:>12,d}")
    total = model.parameter_count()
    print(f"{'total':12s} {total:>12,d}")
    return 0


def cmd_dump_attention(args):
    defaults = dict(input=None, checkpoint=None, model="spct", task="classify",
                    seed=0, d_o=256, layer=0, out="attention",
                    n_classes=8, queries=None)
    opts = _merged_options(args, defaults)
    if not opts.input:
        raise CliError("dump-attention requires --input")
    cloud = load_points(opts.input)
    cloud.category = 0
    rng = np.random.default_rng(opts.seed)
    model = build_model(opts.model, opts.task, rng, n_classes=opts.n_classes,
                        n_points=cloud.n, d_o=opts.d_o)
    if opts.checkpoint:
        load_checkpoint(model, opts.checkpoint)
    model.eval()

    backbone = model.backbone
    clouds, feats, sizes = backbone.embed.forward_batch([cloud])
    layers = backbone.encoder.layers
    if not 0 <= opts.layer < len(layers):
        raise CliError(f"layer index must lie in [0, {len(layers)})")
    cur = feats
    for i in range(opts.layer):
        cur = layers[i].forward_batch(cur, sizes)
    amap = layers[opts.layer].attention_map(cur)

    from .attention import export_attention_map

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"layer{opts.layer}_map.csv"
    pgm_path = out / f"layer{opts.layer}_map.pgm"
    export_attention_map(amap.normalized, csv_path, pgm_path)
    print(f"wrote {csv_path} and {pgm_path}")
    if opts.queries:
        indices = [int(q) for q in str(opts.queries).split(",")]
        coords = clouds[0].coords
        for q in indices:
            qpath = out / f"layer{opts.layer}_query{q}.csv"
            with open(qpath, "w") as fh:
                fh.write("x,y,z,weight\n")
                for i in range(len(coords)):
                    fh.write(
                        ",".join(f"{v:.9g}" for v in coords[i])
                        + f",{amap.normalized[q, i]:.9g}\n"
                    )
            print(f"wrote {qpath}")
    return 0


def cmd_bench(args):
    defaults = dict(sizes="128,256,512,1024", seed=0, repeats=3)
    opts = _merged_options(args, defaults)
    sizes = [int(s) for s in str(opts.sizes).split(",")]
    rng = np.random.default_rng(opts.seed)
    from .attention import AttentionLayer
    from .autodiff import Tensor

    print(f"{'N':>6} {'fps_ms':>10} {'knn_ms':>10} {'attention_ms':>13}")
    for n in sizes:
        cloud = PointCloud(rng.normal(size=(n, 3)))
        t_fps = _time(lambda: farthest_point_sample(cloud, max(1, n // 4)),
                      opts.repeats)
        t_knn = _time(lambda: knn(cloud, cloud.coords, min(32, n)), opts.repeats)
        layer = AttentionLayer(64, rng).eval()
        feats = Tensor(rng.normal(size=(n, 64)))
        t_att = _time(lambda: layer(feats), opts.repeats)
        print(f"{n:>6} {t_fps:>10.2f} {t_knn:>10.2f} {t_att:>13.2f}")
    return 0


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


# -- argument parsing ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="pct",
                                     description="Point cloud transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file mirroring the flags")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=fn)
        return p

    common_model = {
        "--model": dict(choices=["npct", "spct", "pct", "pct3l"]),
        "--task": dict(choices=["classify", "segment", "normals"]),
        "--seed": dict(type=int),
        "--d-o": dict(type=int, dest="d_o"),
    }

    add("gen-data", cmd_gen_data, {
        "--out": {}, "--shapes-per-class": dict(type=int, dest="shapes_per_class"),
        "--points": dict(type=int), "--noise": dict(type=float),
        "--seed": dict(type=int), "--kinds": {},
        "--no-rotate": dict(action="store_false", dest="rotate", default=None),
    })
    add("train", cmd_train, {
        **common_model,
        "--data": {}, "--epochs": dict(type=int), "--batch": dict(type=int),
        "--lr": dict(type=float), "--out": {},
        "--no-augment": dict(action="store_false", dest="augment", default=None),
        "--deterministic": dict(action="store_true", default=None),
        "--verbose": dict(action="store_true", default=None),
    })
    add("eval", cmd_eval, {
        **common_model,
        "--data": {}, "--checkpoint": {}, "--batch": dict(type=int),
        "--multi-scale": dict(action="store_true", dest="multi_scale",
                              default=None),
    })
    add("infer", cmd_infer, {
        **common_model,
        "--input": {}, "--checkpoint": {}, "--out": {},
        "--n-classes": dict(type=int, dest="n_classes"),
        "--n-parts": dict(type=int, dest="n_parts"),
        "--n-categories": dict(type=int, dest="n_categories"),
        "--category": dict(type=int),
    })
    add("gradcheck", cmd_gradcheck, {
        "--seed": dict(type=int), "--tolerance": dict(type=float),
    })
    add("params", cmd_params, {
        **common_model,
        "--n-classes": dict(type=int, dest="n_classes"),
        "--n-parts": dict(type=int, dest="n_parts"),
        "--n-categories": dict(type=int, dest="n_categories"),
        "--points": dict(type=int),
    })
    add("dump-attention", cmd_dump_attention, {
        **common_model,
        "--input": {}, "--checkpoint": {}, "--layer": dict(type=int),
        "--out": {}, "--queries": {},
        "--n-classes": dict(type=int, dest="n_classes"),
    })
    add("bench", cmd_bench, {
        "--sizes": {}, "--seed": dict(type=int), "--repeats": dict(type=int),
    })
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PCT_THREADS")
    if threads:
        _limit_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
