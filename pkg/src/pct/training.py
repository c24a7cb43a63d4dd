"""Optimization loop: SGD with classical momentum, cosine-annealed
learning rate, epoch orchestration, metric tracking and checkpointing.

Determinism contract: with a fixed seed and single-threaded execution,
two runs produce bit-identical metric logs and checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff import NumericError, Tensor
from .geometry import AugmentConfig, PointCloud, augment
from .heads import (
    avg_cosine_error,
    mean_part_iou,
    normal_loss,
    soft_cross_entropy,
    unit_normals,
)
from .layers import Module


class DivergenceError(RuntimeError):
    """Loss became non-finite; the last checkpoint was preserved."""


class GradientError(RuntimeError):
    """A parameter received a non-finite gradient."""


CHECKPOINT_MAGIC = b"PCTCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class Schedule:
    """Cosine annealing from lr_max at epoch 0 to lr_min at epoch T."""

    lr_max: float = 0.01
    lr_min: float = 0.0
    total_epochs: int = 100


def cosine_lr(epoch: int, schedule: Schedule) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (
        1.0 + np.cos(np.pi * epoch / schedule.total_epochs)
    )


class SGD:
    """Classical (non-Nesterov) momentum: v <- 0.9 v + g; p <- p - lr v."""

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.values) for name, p in self.named_params}

    def step(self, lr: float):
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            v = self.buffers[name]
            v *= self.momentum
            v += g
            p.values -= lr * v

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()


# -- checkpoint format ------------------------------------------------------------


def save_checkpoint(model: Module, path):
    """Binary checkpoint: magic, u32 version, then per entry
    (u32 name length, name bytes, u32 rank, u32 extents, float32 LE values).

    Entries cover trainable parameters and BatchNorm running statistics.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in model.named_state():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        entries[name] = values.reshape(shape).astype(np.float64)
    return entries


def load_checkpoint(model: Module, path):
    """Load a checkpoint into a configured model, validating shapes."""
    entries = read_checkpoint(path)
    state = dict(model.named_state())
    if set(entries) != set(state):
        missing = sorted(set(state) - set(entries))
        extra = sorted(set(entries) - set(state))
        raise ValueError(
            f"{path}: state mismatch (missing {missing}, unexpected {extra})"
        )
    for name, p in model.named_parameters():
        if entries[name].shape != p.values.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name}: "
                f"{entries[name].shape} vs {p.values.shape}"
            )
        p.values = entries[name]
    # remaining entries are persistent buffers (BN running statistics)
    def load_buffers(module, prefix=""):
        for attr, value in vars(module).items():
            key = f"{prefix}{attr}"
            if isinstance(value, Module):
                load_buffers(value, f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        load_buffers(item, f"{key}.{i}.")
        for buf_name in getattr(module, "_buffers", {}):
            full = f"{prefix}{buf_name}"
            if entries[full].shape != module._buffers[buf_name].shape:
                raise ValueError(f"{path}: shape mismatch for buffer {full}")
            module._buffers[buf_name] = entries[full]

    load_buffers(model)


# -- training orchestration --------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = "classify"
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.01
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    label_smoothing: float = 0.2
    seed: int = 0
    augment: bool = True
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    out_dir: Optional[str] = None
    eval_every: int = 1
    log_every: int = 10


@dataclass
class TrainResult:
    log_rows: List[tuple]          # (epoch, lr, train_loss, eval_metric)
    best_metric: float
    best_epoch: int
    checkpoint_path: Optional[str]
    metrics_path: Optional[str]


def _metric_better(task, candidate, incumbent):
    if incumbent is None:
        return True
    # accuracy/pIoU maximize; cosine error minimizes
    return candidate < incumbent if task == "normals" else candidate > incumbent


def batch_iter(items, batch_size):
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


def compute_loss(model, clouds, task, epsilon):
    if task == "classify":
        scores = model.forward_batch(clouds)
        labels = [c.category for c in clouds]
        return soft_cross_entropy(scores, labels, epsilon)
    if task == "segment":
        out_clouds, scores, _ = model.forward_batch(clouds)
        labels = np.concatenate([c.labels for c in out_clouds])
        return soft_cross_entropy(scores, labels, epsilon)
    if task == "normals":
        out_clouds, pred, _ = model.forward_batch(clouds)
        gt = np.concatenate([c.normals for c in out_clouds], axis=0)
        return normal_loss(pred, gt)
    raise ValueError(f"unknown task {task!r}")


def evaluate(model, clouds, task, batch_size=16, part_sets=None,
             multi_scale=False, unsigned_normals=False):
    """Inference-mode metric: accuracy (classify), pIoU (segment) or
    average cosine error (normals)."""
    from .heads import multi_scale_eval

    # snapshot train/eval flags so standalone evaluation is side-effect free
    modes = []
    model.apply(lambda m: modes.append((m, m.training))
                if hasattr(m, "training") else None)
    model.eval()
    try:
        if task == "classify":
            correct = 0
            if multi_scale:
                for cloud in clouds:
                    probs = multi_scale_eval(model.predict_scores, cloud)
                    correct += int(np.argmax(probs) == cloud.category)
            else:
                for batch in batch_iter(clouds, batch_size):
                    scores = model.forward_batch(batch).values
                    pred = scores.argmax(axis=1)
                    correct += int(
                        (pred == np.array([c.category for c in batch])).sum()
                    )
            return correct / len(clouds)
        if task == "segment":
            if part_sets is None:
                part_sets = infer_part_sets(clouds)
            shapes = []
            for batch in batch_iter(clouds, batch_size):
                out_clouds, scores, sizes = model.forward_batch(batch)
                pred = scores.values.argmax(axis=1)
                offset = 0
                for cloud, n in zip(out_clouds, sizes):
                    shapes.append(
                        (pred[offset:offset + n], cloud.labels,
                         part_sets[cloud.category])
                    )
                    offset += n
            _, piou = mean_part_iou(shapes)
            return piou
        if task == "normals":
            errors = []
            for batch in batch_iter(clouds, batch_size):
                out_clouds, raw, sizes = model.forward_batch(batch)
                unit, _ = unit_normals(raw.values)
                gt = np.concatenate([c.normals for c in out_clouds], axis=0)
                errors.append(
                    avg_cosine_error(unit, gt, unsigned=unsigned_normals)
                    * len(gt)
                )
                del sizes
            total = sum(c.n for c in clouds)
            return float(np.sum(errors) / total)
        raise ValueError(f"unknown task {task!r}")
    finally:
        for module, was_training in modes:
            module.training = was_training


def infer_part_sets(clouds):
    """Union of observed part labels per category."""
    sets = {}
    for c in clouds:
        if c.labels is None:
            continue
        sets.setdefault(c.category, set()).update(c.labels.tolist())
    return {cat: sorted(parts) for cat, parts in sets.items()}


def train(model: Module, train_clouds, test_clouds, config: TrainConfig,
          part_sets=None, verbose=False) -> TrainResult:
    """Run the full optimization loop.

    Per epoch: shuffle, augment, forward, loss, backward, SGD step, log
    (epoch, lr, train loss, eval metric). The best checkpoint by eval
    metric is retained; a non-finite loss aborts with the last checkpoint
    preserved.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = SGD(
        list(model.named_parameters()),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    schedule = Schedule(config.lr, config.lr_min, max(config.epochs, 1))
    if part_sets is None and config.task == "segment":
        part_sets = infer_part_sets(list(train_clouds) + list(test_clouds))

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = str(out_dir / "checkpoint.bin") if out_dir else None
    metrics_path = str(out_dir / "metrics.csv") if out_dir else None

    log_rows = []
    best_metric = None
    best_epoch = -1
    model.train()
    try:
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, schedule)
            order = rng.permutation(len(train_clouds))
            epoch_losses = []
            for batch_idx in batch_iter(order, config.batch_size):
                batch = []
                for i in batch_idx:
                    cloud = train_clouds[i]
                    if config.augment:
                        cloud = augment(cloud, rng, config.augment_cfg)
                    batch.append(cloud)
                try:
                    loss = compute_loss(model, batch, config.task,
                                        config.label_smoothing)
                    loss_value = float(loss.values)
                except NumericError as exc:
                    if ckpt_path:
                        save_checkpoint(model, ckpt_path)
                    raise DivergenceError(
                        f"non-finite values at epoch {epoch}: {exc}"
                    ) from exc
                if not np.isfinite(loss_value):
                    if ckpt_path:
                        save_checkpoint(model, ckpt_path)
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr)
                epoch_losses.append(loss_value)
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            metric = evaluate(model, test_clouds, config.task,
                              config.batch_size, part_sets=part_sets)
            log_rows.append((epoch, lr, train_loss, metric))
            if verbose and (epoch % config.log_every == 0
                            or epoch == config.epochs - 1):
                print(f"epoch {epoch}: lr={lr:.5f} loss={train_loss:.4f} "
                      f"metric={metric:.4f}", flush=True)
            if _metric_better(config.task, metric, best_metric):
                best_metric = metric
                best_epoch = epoch
                if ckpt_path:
                    save_checkpoint(model, ckpt_path)
    finally:
        if metrics_path:
            write_metrics_csv(metrics_path, log_rows)
        model.eval()

    if config.epochs == 0:
        best_metric = float("nan")
        if ckpt_path:
            save_checkpoint(model, ckpt_path)
    return TrainResult(log_rows, best_metric, best_epoch, ckpt_path, metrics_path)


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,eval_metric\n")
        for epoch, lr, loss, metric in rows:
            fh.write(f"{epoch},{float(lr)!r},{float(loss)!r},{float(metric)!r}\n")
