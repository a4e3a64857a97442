"""Segmentation losses: bootstrapped cross-entropy and soft Jaccard."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor, ops
from ..decoder import ObjectLogits
from ..embedding import one_hot_labels


def _masked_logits(logits) -> Tensor:
    return logits.masked() if isinstance(logits, ObjectLogits) else logits


def pixel_cross_entropy(logits, target) -> Tensor:
    """(B, K, H, W) logits, (B, H, W) labels -> (B, H*W) per-pixel CE."""
    z = _masked_logits(logits)
    B, K, H, W = z.shape
    y = one_hot_labels(np.asarray(target).reshape(B, H, W), K - 1, z.dtype)
    logp = ops.log_softmax(z, axis=1)
    ce = ops.neg(ops.sum(ops.mul(logp, y), axis=1))
    return ops.reshape(ce, (B, H * W))


def bootstrapped_ce(logits, target, keep_frac: float) -> Tensor:
    """Mean CE over the hardest ``keep_frac`` of pixels of each sample, averaged over the batch."""
    if not 0 < keep_frac <= 1:
        raise ValueError(f"keep_frac must be in (0, 1], got {keep_frac}")
    ce = pixel_cross_entropy(logits, target)
    B, n = ce.shape
    k = max(1, int(math.ceil(keep_frac * n)))
    if k >= n:
        return ops.mean(ce)
    idx = np.argpartition(-ce.data, k - 1, axis=1)[:, :k]
    sel = np.zeros(ce.shape, dtype=ce.dtype)
    np.put_along_axis(sel, idx, 1.0, axis=1)
    return ops.scale(ops.sum(ops.mul(ce, sel)), 1.0 / (k * B))


def soft_jaccard(logits, target, valid=None, eps: float = 1e-6) -> Tensor:
    """``1 - mean_objects(sum(p*y) / (sum p + sum y - sum p*y + eps))``, averaged over the batch."""
    if isinstance(logits, ObjectLogits) and valid is None:
        valid = logits.valid_objects
    z = _masked_logits(logits)
    B, K, H, W = z.shape
    target = np.asarray(target).reshape(B, H, W)
    if valid is None:
        valid = target.reshape(B, -1).max(axis=1)
    valid = np.atleast_1d(np.asarray(valid))
    if (valid < 1).any():
        raise ValueError("soft Jaccard needs at least one object per sample")
    y = one_hot_labels(target, K - 1, z.dtype)
    p = ops.softmax(z, axis=1)
    inter = ops.sum(ops.mul(p, y), axis=(2, 3))
    union = ops.sub(ops.add(ops.sum(p, axis=(2, 3)), y.sum(axis=(2, 3))), inter)
    iou = ops.div(inter, ops.add(union, eps))
    ch = np.arange(K)[None, :]
    objw = ((ch >= 1) & (ch <= valid[:, None])).astype(z.dtype)
    objw /= objw.sum(axis=1, keepdims=True)
    per_sample = ops.sub(1.0, ops.sum(ops.mul(iou, objw), axis=1))
    return ops.mean(per_sample)
