"""Classification objectives: softmax cross-entropy and additive-margin softmax.

AM-Softmax scores each sample against L2-normalized class weight rows, so the
logits are cosines; the true-class cosine has the margin ``m`` subtracted and
everything is scaled by ``s`` before the usual cross-entropy:

    L_i = -log( e^{s (cos t_y - m)} / (e^{s (cos t_y - m)} + sum_{j!=y} e^{s cos t_j}) )

Features and class weights are normalized inside the op each forward pass, so
the optimizer sees unconstrained parameters and the loss is invariant to
positive rescaling of any input feature. Batch reduction is the mean. With
m = 0 and s = 1 this degenerates exactly to cross-entropy on cosine logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as t
from .tensor import Tensor

# Incremented whenever a (near-)zero-norm feature hits the eps guard inside
# am_softmax; a cheap tripwire for dead embeddings during training.
zero_norm_feature_count = 0

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class AmSoftmaxConfig:
    margin: float = 0.4
    scale: float = 30.0
    num_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin {self.margin} outside [0, 1)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


def _check_labels(labels, n, c):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    return labels


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    lse = t.row_logsumexp(logits)
    picked = t.gather_rows(logits, labels)
    return t.mean_all(t.sub(lse, picked))


def cosine_logits(features: Tensor, weights: Tensor) -> Tensor:
    """Pairwise cosines between feature rows and class-weight rows, (n, C)."""
    f = t.l2_normalize(features, axis=1, eps=_NORM_EPS)
    w = t.l2_normalize(weights, axis=1, eps=_NORM_EPS)
    return t.matmul(f, t.transpose(w))


def am_softmax(features: Tensor, weights: Tensor, labels, cfg: AmSoftmaxConfig) -> Tensor:
    """Additive-margin softmax loss; normalizes features and weights internally."""
    global zero_norm_feature_count
    n, d = features.shape
    if weights.shape != (cfg.num_classes, d):
        raise ValueError(
            f"classifier weights {weights.shape}, expected ({cfg.num_classes}, {d})")
    labels = _check_labels(labels, n, cfg.num_classes)

    norms = np.sqrt((features.data * features.data).sum(axis=1))
    dead = int((norms <= _NORM_EPS).sum())
    if dead:
        zero_norm_feature_count += dead

    cos = cosine_logits(features, weights)
    margin = np.zeros((n, cfg.num_classes), dtype=features.data.dtype)
    margin[np.arange(n), labels] = cfg.margin
    shifted = t.sub(cos, Tensor(margin))
    return softmax_ce(t.scale(shifted, cfg.scale), labels)
