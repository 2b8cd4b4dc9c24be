"""Cross transformer: dual cross-attention blocks that estimate the
group-induced component inside each branch's features and subtract it.

The identity block attends from identity queries onto group keys and uses
identity value projections to form the estimated group-induced component,
which is subtracted from the identity features. The group block mirrors the
roles. Multi-head support splits the feature dimension across heads and
concatenates the per-head estimates; a learned 2D relative-position bias is
added to the attention logits.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Param, Tensor


@dataclass
class CtConfig:
    d: int
    heads: int = 2
    max_rel_offset: int = 7

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0:
            raise ConfigError(f"d and heads must be positive, got d={self.d}, heads={self.heads}")
        if self.d % self.heads != 0:
            raise ConfigError(f"feature dim {self.d} is not divisible by {self.heads} heads")
        if self.max_rel_offset <= 0:
            raise ConfigError(f"max_rel_offset must be positive, got {self.max_rel_offset}")

    @property
    def d_head(self):
        return self.d // self.heads


@dataclass
class FeatureMap:
    """A spatial feature grid flattened to (positions, channels).

    values has shape (n, d) or batched (B, n, d) with n = h * w.
    """

    values: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.values.data.ndim not in (2, 3):
            raise ShapeError(f"feature values must be rank 2 or 3, got {self.values.shape}")
        if self.n != self.h * self.w:
            raise ShapeError(
                f"feature map has {self.n} positions but h*w = {self.h}*{self.w} = {self.h * self.w}"
            )

    @property
    def n(self):
        return self.values.shape[-2]

    @property
    def d(self):
        return self.values.shape[-1]


PROJECTION_ROLES = ("id_qry", "id_key", "id_val", "ra_qry", "ra_key", "ra_val")


class CtWeights:
    """The six learnable projections plus relative-position bias tables.

    Each projection family holds a weight of shape (heads, d, d_head) and a
    bias of shape (heads, d_head); the position tables have one row-offset
    and one column-offset entry per head and clipped offset. Value
    projections start at zero so a fresh module is exactly the identity map
    (the subtracted estimates grow from nothing as training identifies the
    group component); queries and keys start at the usual uniform fan bound.
    """

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        table = 2 * cfg.max_rel_offset + 1
        self.proj = {}
        for role in PROJECTION_ROLES:
            if rng is None or role.endswith("_val"):
                w = np.zeros((cfg.heads, cfg.d, cfg.d_head))
            else:
                w = T.xavier_uniform(rng, cfg.d, cfg.d_head, (cfg.heads, cfg.d, cfg.d_head))
            self.proj[role] = (Param(w), Param(np.zeros((cfg.heads, cfg.d_head))))
        self.rel_rows = Param(np.zeros((cfg.heads, table)))
        self.rel_cols = Param(np.zeros((cfg.heads, table)))

    def params(self):
        out = {}
        for role, (w, b) in self.proj.items():
            out[f"{role}.w"] = w
            out[f"{role}.b"] = b
        out["rel_rows"] = self.rel_rows
        out["rel_cols"] = self.rel_cols
        return out

    def swapped(self):
        """A view with the id and ra projection families exchanged."""
        other = CtWeights(self.cfg)
        for role in ("qry", "key", "val"):
            other.proj[f"id_{role}"] = self.proj[f"ra_{role}"]
            other.proj[f"ra_{role}"] = self.proj[f"id_{role}"]
        other.rel_rows = self.rel_rows
        other.rel_cols = self.rel_cols
        return other


@dataclass
class CtOutput:
    x_id_out: FeatureMap
    x_ra_out: FeatureMap
    attn_id_to_ra: Tensor  # (..., heads, n, n), rows sum to 1
    attn_ra_to_id: Tensor
    eps_ra: Tensor  # group-induced component subtracted from the id branch
    eps_id: Tensor


def project(values, weight, bias):
    """G = x @ W + b with the bias broadcast over positions."""
    if values.shape[-1] != weight.shape[-2]:
        raise ConfigError(
            f"projection dims disagree: features {values.shape} vs weight {weight.shape}"
        )
    return T.add(T.matmul(values, weight), bias)


def relative_offset_index(h, w, max_rel_offset):
    """Clipped (row, col) offset index matrices, key position minus query."""
    pos = np.arange(h * w)
    rows, cols = pos // w, pos % w
    drow = np.clip(rows[None, :] - rows[:, None], -max_rel_offset, max_rel_offset)
    dcol = np.clip(cols[None, :] - cols[:, None], -max_rel_offset, max_rel_offset)
    return drow + max_rel_offset, dcol + max_rel_offset


def cross_attention(q, k, h, w, rel_rows, rel_cols, max_rel_offset):
    """Row-stochastic attention from q positions onto k positions.

    Logits are (q_i . k_j)/sqrt(d_head) plus the learned row- and
    column-offset biases; the softmax normalizes over all n key positions.
    """
    n = q.shape[-2]
    if n != h * w:
        raise ConfigError(f"attention over {n} positions but h*w = {h * w}")
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    d_head = q.shape[-1]
    logits = T.mul(T.matmul(q, T.transpose(k, _swap_last2(k))), 1.0 / math.sqrt(d_head))
    row_idx, col_idx = relative_offset_index(h, w, max_rel_offset)
    bias = T.add(T.table_rows(rel_rows, row_idx), T.table_rows(rel_cols, col_idx))
    return T.softmax(T.add(logits, bias))


def _swap_last2(t):
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def estimate_bias(attn, src_values, w_val, b_val):
    """Per-head attn @ (src @ W_val + b_val), heads concatenated to width d.

    attn is (heads, n, n) or (B, heads, n, n); src_values is the matching
    (n, d) or (B, n, d) feature tensor.
    """
    batched = src_values.data.ndim == 3
    heads = attn.shape[-3]
    n, d = src_values.shape[-2], src_values.shape[-1]
    src4 = T.reshape(src_values, (-1, 1, n, d) if batched else (1, n, d))
    vals = project(src4, w_val, T.reshape(b_val, (heads, 1, -1)))
    per_head = T.matmul(attn, vals)  # (..., heads, n, d_head)
    axes = list(range(per_head.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.reshape(T.transpose(per_head, axes), src_values.shape)


def _attend(x_qry, x_key, w_qry, b_qry, w_key, b_key, weights, cfg, h, w):
    batched = x_qry.data.ndim == 3
    n, d = x_qry.shape[-2], x_qry.shape[-1]
    shape4 = (-1, 1, n, d) if batched else (1, n, d)
    q = project(T.reshape(x_qry, shape4), w_qry, T.reshape(b_qry, (cfg.heads, 1, cfg.d_head)))
    k = project(T.reshape(x_key, shape4), w_key, T.reshape(b_key, (cfg.heads, 1, cfg.d_head)))
    return cross_attention(
        q, k, h, w, weights.rel_rows.value, weights.rel_cols.value, cfg.max_rel_offset
    )


def ct_forward(x_id, x_ra, weights, cfg):
    """Run both cross-attention blocks and subtract the cross estimates.

    Identity block: queries from x_id, keys from x_ra, values from x_id;
    the result eps_ra is subtracted from x_id. The group block mirrors the
    roles. Attention maps are retained for export.
    """
    if x_id.values.shape != x_ra.values.shape or (x_id.h, x_id.w) != (x_ra.h, x_ra.w):
        raise ConfigError(
            f"branch feature maps disagree: {x_id.values.shape} ({x_id.h}x{x_id.w}) "
            f"vs {x_ra.values.shape} ({x_ra.h}x{x_ra.w})"
        )
    if x_id.d != cfg.d:
        raise ConfigError(f"feature dim {x_id.d} does not match configured d={cfg.d}")
    h, w = x_id.h, x_id.w
    p = weights.proj

    attn_id = _attend(
        x_id.values, x_ra.values,
        p["id_qry"][0].value, p["id_qry"][1].value,
        p["ra_key"][0].value, p["ra_key"][1].value,
        weights, cfg, h, w,
    )
    eps_ra = estimate_bias(attn_id, x_id.values, p["id_val"][0].value, p["id_val"][1].value)

    attn_ra = _attend(
        x_ra.values, x_id.values,
        p["ra_qry"][0].value, p["ra_qry"][1].value,
        p["id_key"][0].value, p["id_key"][1].value,
        weights, cfg, h, w,
    )
    eps_id = estimate_bias(attn_ra, x_ra.values, p["ra_val"][0].value, p["ra_val"][1].value)

    return CtOutput(
        x_id_out=FeatureMap(T.sub(x_id.values, eps_ra), h, w),
        x_ra_out=FeatureMap(T.sub(x_ra.values, eps_id), h, w),
        attn_id_to_ra=attn_id,
        attn_ra_to_id=attn_ra,
        eps_ra=eps_ra,
        eps_id=eps_id,
    )


def attention_heatmaps(attn, h, w):
    """Key-marginal heat map per head: column means reshaped to the grid.

    attn is a plain array of shape (..., heads, n, n); averaging over the
    query axis shows how much each key position is attended to overall.
    """
    attn = np.asarray(attn)
    marginal = attn.mean(axis=-2)
    return marginal.reshape(attn.shape[:-2] + (h, w))
