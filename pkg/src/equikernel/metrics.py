"""Retrieval metrics over Euclidean distances."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalMetrics:
    rank1: float
    rank5: float
    mAP: float
    mINP: float
    evaluated: int
    skipped: int


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def retrieval_eval(probe: np.ndarray, probe_labels, gallery: np.ndarray, gallery_labels) -> RetrievalMetrics:
    """Rank each probe's gallery by distance (ties go to the lower gallery
    index). Probes whose identity is absent from the gallery are skipped and
    reported in a warning.

    mINP averages ``#positives / rank of the last positive``.
    """
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if len(gallery_labels) == 0:
        raise ValueError("gallery is empty")
    if len(probe_labels) == 0:
        raise ValueError("no probes")
    dist = euclidean(probe, gallery)
    order = np.argsort(dist, axis=1, kind="stable")
    hits = gallery_labels[order] == probe_labels[:, None]
    has = hits.any(axis=1)
    skipped = int((~has).sum())
    if skipped:
        log.warning("%d of %d probes have no gallery match and were skipped", skipped, len(probe_labels))
    hits = hits[has]
    if len(hits) == 0:
        raise ValueError("no probe identity appears in the gallery")
    ranks = np.arange(1, hits.shape[1] + 1)
    cum = np.cumsum(hits, axis=1)
    npos = cum[:, -1]
    ap = (hits * cum / ranks).sum(axis=1) / npos
    last = hits.shape[1] - np.argmax(hits[:, ::-1], axis=1)
    inp = npos / last
    k5 = min(5, hits.shape[1])
    return RetrievalMetrics(float(hits[:, 0].mean()), float(hits[:, :k5].any(axis=1).mean()), float(ap.mean()),
                            float(inp.mean()), int(len(hits)), skipped)
