"""Metric-learning objective: batch-all triplet plus cross-entropy, per part."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, astensor, clamp_min, getitem, log_softmax, matmul, relu, sqrt, transpose, tsum


def check_batch(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2 or (counts >= 2).sum() < 1:
        raise ValueError("triplet batch needs >= 2 identities and at least one with >= 2 sequences; "
                         f"got counts {dict(zip(ids.tolist(), counts.tolist()))}")


def pairwise_distances(emb) -> Tensor:
    """Euclidean distances within each part: (parts, N, D) -> (parts, N, N)."""
    emb = astensor(emb)
    sq = tsum(emb * emb, axis=-1, keepdims=True)
    gram = matmul(emb, transpose(emb, (0, 2, 1)))
    d2 = sq + transpose(sq, (0, 2, 1)) - gram * 2.0
    return sqrt(clamp_min(d2, 1e-12))


def triplet_loss(emb, labels, margin: float = 0.2) -> tuple[Tensor, float]:
    """Batch-all hinge ``d(a,p) - d(a,n) + margin`` over every valid triplet,
    averaged over the strictly positive terms of each part, then over parts.
    Also returns the fraction of active triplets."""
    labels = np.asarray(labels)
    check_batch(labels)
    d = pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    n_parts = d.shape[0]
    ap = d.reshape(n_parts, len(labels), len(labels), 1)
    an = d.reshape(n_parts, len(labels), 1, len(labels))
    hinge = relu(ap - an + margin) * valid.astype(d.dtype)
    active = (hinge.data > 0).sum(axis=(1, 2, 3))
    per_part = tsum(hinge, axis=(1, 2, 3)) * (1.0 / np.maximum(active, 1)).astype(d.dtype)
    frac = float(active.sum() / max(valid.sum() * n_parts, 1))
    return tsum(per_part) * (1.0 / n_parts), frac


def cross_entropy(logits, labels) -> Tensor:
    """Mean CE over samples and parts; ``logits`` is (parts, N, classes) and
    ``labels`` are integer class indices."""
    logits = astensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (slice(None), np.arange(len(labels)), labels))
    return tsum(picked) * (-1.0 / picked.size)


@dataclass
class LossReport:
    total: float
    triplet: float
    ce: float
    active_fraction: float


def combined_loss(emb, logits, labels, margin: float = 0.2, beta: float = 1.0) -> tuple[Tensor, LossReport]:
    tri, frac = triplet_loss(emb, labels, margin)
    ce = cross_entropy(logits, labels)
    total = tri + ce * beta
    return total, LossReport(float(total.data), float(tri.data), float(ce.data), frac)
