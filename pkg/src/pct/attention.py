"""Self-attention (SA) and offset-attention (OA) layers.

SA uses scaled dot-product attention with row softmax and feeds the
attention feature through an LBR with a residual connection. OA feeds the
offset (input minus attention feature) through the LBR instead, and
normalizes the attention map with a column softmax followed by a row
l1-normalization (no sqrt(d_a) scaling). The dual normalization makes
every OA map row-stochastic with nonnegative entries, so the offset acts
like a discrete graph Laplacian applied to the input features;
:func:`laplacian_residual` validates that identity when the value
projection is the identity matrix.

Layers are immutable during forward/backward in inference mode and may be
evaluated concurrently on distinct inputs; training-mode BN mutates
running statistics and needs exclusive access.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LBR, Module


@dataclass
class AttentionMap:
    """Raw (pre-normalization) and normalized N x N attention weights."""

    raw: np.ndarray
    normalized: np.ndarray


def sa_normalize(raw: Tensor, d_a: int) -> Tensor:
    """Divide by sqrt(d_a), then softmax along each row."""
    scaled = ad.mul(raw, 1.0 / np.sqrt(d_a))
    return ad.softmax(scaled, axis=1)


def oa_normalize(raw: Tensor) -> Tensor:
    """Column-wise softmax (no scaling), then divide each row by its sum.

    Row sums of the column softmax are strictly positive analytically, so
    no epsilon is added. Evaluated in log space: the row l1 normalization
    of the (positive) column-softmax entries equals a row log-softmax of
    their logs, which stays finite even where the direct row sums would
    underflow to zero.
    """
    return ad.exp(ad.log_softmax(ad.log_softmax(raw, axis=0), axis=1))


class AttentionLayer(Module):
    """One SA or OA layer: bias-free query/key/value projections
    (d_a = d_e/4 by default) plus an LBR of width d_e."""

    def __init__(self, d_e, rng, variant="OA", d_a=None):
        if variant not in ("SA", "OA"):
            raise ValueError(f"variant must be 'SA' or 'OA', got {variant!r}")
        self.d_e = d_e
        self.d_a = d_a if d_a is not None else d_e // 4
        self.variant = variant
        from .layers import init_linear_weight

        self.w_q = Tensor(init_linear_weight(rng, d_e, self.d_a), requires_grad=True)
        self.w_k = Tensor(init_linear_weight(rng, d_e, self.d_a), requires_grad=True)
        self.w_v = Tensor(init_linear_weight(rng, d_e, d_e), requires_grad=True)
        self.lbr = LBR(d_e, d_e, rng)

    def forward(self, f_in: Tensor) -> Tensor:
        return self.forward_batch(f_in, [f_in.shape[0]])

    def forward_batch(self, stack: Tensor, segment_sizes) -> Tensor:
        """Apply attention per cloud on a row-stacked feature matrix.

        Attention maps never mix rows across segments; the LBR (and its
        batch statistics in training mode) runs once over the whole stack.
        """
        pre_lbr = []
        offset = 0
        for n in segment_sizes:
            rows = ad.gather_rows(stack, np.arange(offset, offset + n))
            f_sa = self._attend(rows)
            pre_lbr.append(ad.sub(rows, f_sa) if self.variant == "OA" else f_sa)
            offset += n
        merged = pre_lbr[0] if len(pre_lbr) == 1 else ad.concat(pre_lbr, axis=0)
        return ad.add(self.lbr(merged), stack)

    def _attend(self, f_in: Tensor) -> Tensor:
        q, k, v = qkv_project(f_in, self)
        raw = ad.matmul(q, ad.transpose(k))
        a = oa_normalize(raw) if self.variant == "OA" else sa_normalize(raw, self.d_a)
        return ad.matmul(a, v)

    def attention_map(self, f_in: Tensor) -> AttentionMap:
        """The raw and normalized attention weights for one input."""
        q, k, _ = qkv_project(f_in, self)
        raw = ad.matmul(q, ad.transpose(k))
        a = oa_normalize(raw) if self.variant == "OA" else sa_normalize(raw, self.d_a)
        return AttentionMap(raw=raw.values.copy(), normalized=a.values.copy())


def qkv_project(f_in: Tensor, layer: AttentionLayer):
    """Bias-free projections Q = F W_q, K = F W_k (N x d_a), V = F W_v."""
    if f_in.shape[1] != layer.d_e:
        raise ad.ShapeError(
            f"attention expects width {layer.d_e}, got input shape {f_in.shape}"
        )
    return (
        ad.matmul(f_in, layer.w_q),
        ad.matmul(f_in, layer.w_k),
        ad.matmul(f_in, layer.w_v),
    )


def self_attention(f_in: Tensor, layer: AttentionLayer) -> Tensor:
    """F_out = LBR(A V) + F_in with row-softmax normalized A."""
    if layer.variant != "SA":
        raise ValueError("self_attention requires an SA-variant layer")
    return layer.forward(f_in)


def offset_attention(f_in: Tensor, layer: AttentionLayer) -> Tensor:
    """F_out = LBR(F_in - A V) + F_in with dual-normalized A."""
    if layer.variant != "OA":
        raise ValueError("offset_attention requires an OA-variant layer")
    return layer.forward(f_in)


def laplacian_residual(f_in: Tensor, layer: AttentionLayer) -> float:
    """Max-norm gap between the offset branch and (I - A) F_in, evaluated
    with the value projection forced to identity.

    With W_v = I the two sides agree exactly (the offset is a discrete
    Laplacian applied to the input); for learned W_v this is a diagnostic,
    not an asserted bound.
    """
    if layer.variant != "OA":
        raise ValueError("laplacian_residual requires an OA-variant layer")
    f = f_in.values
    q = f @ layer.w_q.values
    k = f @ layer.w_k.values
    raw = Tensor(q @ k.T)
    a = oa_normalize(raw).values
    f_sa = a @ f  # W_v forced to identity
    lhs = f - f_sa
    rhs = (np.eye(len(f)) - a) @ f
    return float(np.abs(lhs - rhs).max())


def export_attention_map(normalized: np.ndarray, csv_path, pgm_path):
    """Write an N x N normalized map as CSV and as 8-bit grayscale PGM
    (row-major, value = round(255 * alpha / max alpha))."""
    normalized = np.asarray(normalized, dtype=np.float64)
    np.savetxt(csv_path, normalized, delimiter=",")
    peak = normalized.max()
    scale = 255.0 / peak if peak > 0 else 0.0
    pixels = np.rint(normalized * scale).astype(np.uint8)
    h, w = pixels.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
