"""Identity classification and pairwise metric losses."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, ops

# additive mask for excluded pairs; finite so masked rows never produce inf - inf
_MASKED = -1e30


def cross_entropy_ls(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Cross-entropy against targets with 1 - eps on the true class and eps/(N-1) elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing eps must be in [0, 1)")
    if n == 1:
        target = np.ones((b, 1))
    else:
        target = np.full((b, n), eps / (n - 1))
        target[np.arange(b), labels] = 1.0 - eps
    logp = ops.log_softmax(logits, axis=1)
    return ops.neg(ops.mean(ops.sum(ops.mul(logp, target.astype(logits.dtype)), axis=1)))


def pair_masks(labels) -> tuple:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    return same & ~eye, ~same


def circle_loss(features: Tensor, labels, gamma: float = 128.0, m: float = 0.25,
                detach_weights: bool = True) -> Tensor:
    """Pairwise circle loss averaged over anchors.

    Rows are L2-normalized internally, so only cosine similarities matter.
    For anchor i with positives s_p and negatives s_n::

        a_p = max(0, 1 + m - s_p),  a_n = max(0, s_n + m)
        loss_i = softplus(lse(gamma a_n (s_n - m)) + lse(-gamma a_p (s_p - 1 + m)))

    Anchors lacking a positive or a negative partner are skipped. With
    ``detach_weights`` the a_p/a_n factors are constants for backprop.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not 0.0 < m < 1.0:
        raise ValueError("margin m must be in (0, 1)")
    pos, neg = pair_masks(labels)
    if not pos.any() or not neg.any():
        raise ValueError("circle loss needs at least one positive and one negative pair in the batch")
    x = ops.l2_normalize(features, axis=1)
    sim = ops.matmul(x, ops.transpose(x))
    dt = sim.dtype.type
    if detach_weights:
        alpha_p = np.maximum(0.0, 1.0 + m - sim.data).astype(sim.dtype)
        alpha_n = np.maximum(0.0, sim.data + m).astype(sim.dtype)
    else:
        alpha_p = ops.clamp_min(ops.sub(dt(1.0 + m), sim), 0.0)
        alpha_n = ops.clamp_min(ops.add(sim, dt(m)), 0.0)
    logit_p = ops.mul(ops.mul(alpha_p, ops.sub(sim, dt(1.0 - m))), dt(-gamma))
    logit_n = ops.mul(ops.mul(alpha_n, ops.sub(sim, dt(m))), dt(gamma))
    logit_p = ops.add(logit_p, np.where(pos, 0.0, _MASKED).astype(sim.dtype))
    logit_n = ops.add(logit_n, np.where(neg, 0.0, _MASKED).astype(sim.dtype))
    per_anchor = ops.softplus(ops.add(ops.logsumexp(logit_p, axis=1), ops.logsumexp(logit_n, axis=1)))
    valid = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
    return ops.mean(ops.take(per_anchor, valid))


def circle_loss_pairs(sp: Tensor, sn: Tensor, gamma: float = 128.0, m: float = 0.25) -> Tensor:
    """Circle loss for one set of positive and negative similarity scores."""
    dt = sp.dtype.type
    alpha_p = np.maximum(0.0, 1.0 + m - sp.data).astype(sp.dtype)
    alpha_n = np.maximum(0.0, sn.data + m).astype(sn.dtype)
    logit_p = ops.mul(ops.mul(alpha_p, ops.sub(sp, dt(1.0 - m))), dt(-gamma))
    logit_n = ops.mul(ops.mul(alpha_n, ops.sub(sn, dt(m))), dt(gamma))
    return ops.softplus(ops.add(ops.logsumexp(logit_p, axis=0), ops.logsumexp(logit_n, axis=0)))
