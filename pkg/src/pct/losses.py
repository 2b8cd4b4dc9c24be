"""Angular-margin classification losses for the identity branch, plain
cross-entropy for the group branch, and their weighted total.

Both margin variants work on unit-normalized embeddings against
unit-normalized class weight rows: the additive angular variant scales
cos(theta_y + m) on the target logit, the additive cosine variant scales
cos(theta_y) - m. With m = 0 the two coincide with plain scaled softmax.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .tensor import Param, Tensor

COS_CLAMP = 1e-7  # keeps arccos gradients finite at theta in {0, pi}


@dataclass
class MarginConfig:
    variant: str = "arc"
    s: float = 64.0
    m: float = 0.35
    num_classes: int = 2

    def __post_init__(self):
        if self.variant not in ("arc", "cos"):
            raise ConfigError(f"margin variant must be 'arc' or 'cos', got {self.variant!r}")
        if self.s <= 0:
            raise ConfigError(f"scale s must be positive, got {self.s}")
        if self.m < 0:
            raise ConfigError(f"margin m must be nonnegative, got {self.m}")
        if self.variant == "arc" and self.m >= math.pi / 2:
            raise ConfigError(f"angular margin must stay below pi/2, got {self.m}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")


class ClassifierHead:
    """Margin classifier weights, one row per class, no bias.

    Rows are renormalized to unit length inside the logit computation, so
    the stored parameter scale never affects the loss.
    """

    def __init__(self, num_classes, embed_dim, rng=None):
        if rng is None:
            w = np.zeros((num_classes, embed_dim))
        else:
            w = T.xavier_uniform(rng, embed_dim, num_classes, (num_classes, embed_dim))
        self.weight = Param(w)


def _unit_rows(x):
    norms = T.power(T.tsum(T.mul(x, x), axis=-1, keepdims=True), 0.5)
    if np.any(norms.data == 0.0):
        raise NumericError("cannot normalize a zero-norm vector")
    return T.mul(x, T.power(norms, -1.0))


def margin_logits(embed, head, labels, cfg):
    """Scaled cosine logits with the margin applied to each target class.

    embed is (B, dim) (a single vector is promoted), labels is (B,) int.
    Cosines are clamped away from +-1 before the arccos.
    """
    embed = embed if isinstance(embed, Tensor) else Tensor(embed)
    single = embed.data.ndim == 1
    if single:
        embed = T.reshape(embed, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ContractError(f"label out of range [0, {cfg.num_classes}): {labels}")
    w_unit = _unit_rows(head.weight.value)
    x_unit = _unit_rows(embed)
    cosines = T.clip(T.matmul(x_unit, T.transpose(w_unit, (1, 0))), -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    target_cos = T.take_rows(cosines, labels)
    if cfg.variant == "arc":
        target_logit = T.cos(T.add(T.arccos(target_cos), cfg.m))
    else:
        target_logit = T.sub(target_cos, cfg.m)
    onehot = np.zeros((labels.size, cfg.num_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    delta = T.reshape(T.sub(target_logit, target_cos), (-1, 1))
    adjusted = T.add(cosines, T.mul(onehot, delta))
    logits = T.mul(adjusted, cfg.s)
    return T.reshape(logits, (cfg.num_classes,)) if single else logits


def cross_entropy(logits, labels):
    """Mean negative log-likelihood over rows, via stable log-softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy needs a nonempty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ContractError(f"label out of range [0, {logits.shape[-1]})")
    return T.mul(T.tsum(T.take_rows(T.log_softmax(logits), labels)), -1.0 / labels.size)


def face_loss(logits, labels):
    """Mean cross-entropy over margin logits."""
    return cross_entropy(logits, labels)


class RaceHead:
    """Plain linear classifier on the group-branch embedding."""

    def __init__(self, num_groups, embed_dim, rng=None):
        if rng is None:
            w = np.zeros((embed_dim, num_groups))
        else:
            w = T.xavier_uniform(rng, embed_dim, num_groups, (embed_dim, num_groups))
        self.weight = Param(w)
        self.bias = Param(np.zeros(num_groups))


def race_loss(ra_embed, labels, head):
    """Softmax cross-entropy of the linear group head."""
    ra_embed = ra_embed if isinstance(ra_embed, Tensor) else Tensor(ra_embed)
    logits = T.add(T.matmul(ra_embed, head.weight.value), head.bias.value)
    return cross_entropy(logits, labels)


@dataclass
class LossWeights:
    alpha: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and nonnegative, got {self.alpha}")


def total_loss(face, race, weights):
    """face + alpha * race."""
    return T.add(face, T.mul(race, weights.alpha))
