"""Neural building blocks: Linear, BatchNorm, Dropout and the LBR block
(Linear -> BatchNorm -> ReLU) every other module composes.

Parameters are plain Tensors with ``requires_grad=True``. Modules are
immutable during forward in inference mode; training-mode BatchNorm
mutates running statistics and needs exclusive access per layer.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DegenerateBatchError(ValueError):
    """Training-mode BatchNorm over fewer than 2 rows."""


class Module:
    """Lightweight module base: parameter discovery + train/eval switching."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_state(self, prefix=""):
        """Parameters plus persistent buffers (BN running statistics)."""
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value.values
            elif isinstance(value, Module):
                yield from value.named_state(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_state(f"{key}.{i}.")
        for name, buf in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buf

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def apply(self, fn):
        fn(self)
        for child in self._children():
            child.apply(fn)

    def train(self):
        def set_mode(m):
            if hasattr(m, "training"):
                m.training = True

        self.apply(set_mode)
        return self

    def eval(self):
        def set_mode(m):
            if hasattr(m, "training"):
                m.training = False

        self.apply(set_mode)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_linear_weight(rng, d_in, d_out):
    """Uniform in +-sqrt(1/fan_in)."""
    bound = np.sqrt(1.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Tensor(init_linear_weight(rng, d_in, d_out), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeError(
                f"Linear expects width {self.d_in}, got input shape {x.shape}"
            )
        if self.bias is None:
            return ad.matmul(x, self.weight)
        return _affine(x, self.weight, self.bias)


def _affine(x, weight, bias):
    """Fused x @ W + b (one graph node instead of matmul followed by add)."""
    out = x.values @ weight.values + bias.values

    def bwd(g):
        return [
            (x, g @ weight.values.T),
            (weight, x.values.T @ g),
            (bias, g.sum(axis=tuple(range(g.ndim - 1)))),
        ]

    return Tensor(out, _parents=(x, weight, bias), _backward=bwd)


class BatchNorm(Module):
    """BatchNorm over the combined batch x points axis (axis 0) per channel.

    Training mode normalizes with current-batch statistics (biased variance)
    and updates running statistics as new = (1-momentum)*old + momentum*batch.
    Inference mode uses the running statistics.
    """

    def __init__(self, width, eps=1e-5, momentum=0.1):
        self.width = width
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(width), requires_grad=True)
        self.shift = Tensor(np.zeros(width), requires_grad=True)
        self.training = True
        self._buffers = {
            "running_mean": np.zeros(width),
            "running_var": np.ones(width),
        }

    @property
    def running_mean(self):
        return self._buffers["running_mean"]

    @property
    def running_var(self):
        return self._buffers["running_var"]

    def forward(self, x: Tensor, relu: bool = False) -> Tensor:
        if x.shape[-1] != self.width:
            raise ad.ShapeError(
                f"BatchNorm expects width {self.width}, got input shape {x.shape}"
            )
        if self.training:
            if x.shape[0] < 2:
                raise DegenerateBatchError(
                    "training-mode BatchNorm needs at least 2 rows"
                )
            mu = x.values.mean(axis=0)
            var = x.values.var(axis=0)  # biased
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self.running_mean + m * mu
            self._buffers["running_var"] = (1 - m) * self.running_var + m * var
            return _bn_train(x, self.scale, self.shift, mu, var, self.eps, relu)
        return _bn_eval(x, self.scale, self.shift,
                        self.running_mean, self.running_var, self.eps, relu)


def _bn_train(x, scale, shift, mu, var, eps, relu=False):
    """Fused training-mode BatchNorm, optionally followed by ReLU
    (single graph node per call)."""
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = xhat * scale.values + shift.values
    if relu:
        out = np.where(out > 0.0, out, 0.0)
    n = x.shape[0]

    def bwd(g):
        if relu:
            g = g * (out > 0.0)
        g_shift = g.sum(axis=0)
        g_scale = (g * xhat).sum(axis=0)
        # d/dx of (x - mean)/std with batch statistics
        g_x = (scale.values * inv / n) * (
            n * g - g_shift - xhat * g_scale
        )
        return [(x, g_x), (scale, g_scale), (shift, g_shift)]

    return Tensor(out, _parents=(x, scale, shift), _backward=bwd)


def _bn_eval(x, scale, shift, running_mean, running_var, eps, relu=False):
    """Fused inference-mode BatchNorm using running statistics."""
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.values - running_mean) * inv
    out = xhat * scale.values + shift.values
    if relu:
        out = np.where(out > 0.0, out, 0.0)

    def bwd(g):
        if relu:
            g = g * (out > 0.0)
        return [
            (x, g * (scale.values * inv)),
            (scale, (g * xhat).sum(axis=0)),
            (shift, g.sum(axis=0)),
        ]

    return Tensor(out, _parents=(x, scale, shift), _backward=bwd)


class Dropout(Module):
    """Inverted dropout; identity in inference mode."""

    def __init__(self, p, rng):
        self.p = p
        self.rng = rng
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.rng, training=self.training)


class LBR(Module):
    """Linear -> BatchNorm -> ReLU, the basic feed-forward unit."""

    def __init__(self, d_in, d_out, rng):
        self.linear = Linear(d_in, d_out, rng)
        self.bn = BatchNorm(d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.linear(x), relu=True)


class LBRD(Module):
    """LBR followed by dropout."""

    def __init__(self, d_in, d_out, rng, p=0.5):
        self.lbr = LBR(d_in, d_out, rng)
        self.drop = Dropout(p, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.lbr(x))


def lbr_forward(x: Tensor, lbr: LBR) -> Tensor:
    """Functional wrapper: ReLU(BN(x W + b)) under the block's current mode."""
    return lbr(x)
