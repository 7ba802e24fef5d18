"""Toy-scale training: (P, K) batches, SGD with momentum and step decay."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from .core import GradTape, no_tape
from .data import GaitSequence
from .loss import combined_loss
from .metrics import RetrievalMetrics, retrieval_eval
from .model import Network

log = logging.getLogger(__name__)


class PKSampler:
    """Yields index batches of ``p`` identities x ``k`` sequences."""

    def __init__(self, labels, p: int, k: int, rng: np.random.Generator):
        labels = np.asarray(labels)
        self.by_id = {lab: np.flatnonzero(labels == lab) for lab in np.unique(labels)}
        if len(self.by_id) < p:
            raise ValueError(f"(P,K) sampling needs at least P={p} identities, found {len(self.by_id)}")
        self.p, self.k, self.rng = p, k, rng
        self.ids = np.array(sorted(self.by_id))

    def sample(self) -> np.ndarray:
        chosen = self.rng.choice(self.ids, size=self.p, replace=False)
        out = []
        for lab in chosen:
            pool = self.by_id[lab]
            out.append(self.rng.choice(pool, size=self.k, replace=len(pool) < self.k))
        return np.concatenate(out)


def frame_window(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous window; short sequences are tiled."""
    t = frames.shape[0]
    start = int(rng.integers(0, t)) if t > length else 0
    idx = (start + np.arange(length)) % t
    return frames[idx]


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4,
                 milestones=(), gamma: float = 0.1):
        self.params = list(params)
        self.base_lr = lr
        self.momentum, self.weight_decay = momentum, weight_decay
        self.milestones, self.gamma = tuple(milestones), gamma
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, it: int) -> float:
        return self.base_lr * self.gamma ** sum(it >= m for m in self.milestones)

    def step(self, it: int) -> None:
        lr = self.lr_at(it)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)


@dataclass(frozen=True)
class TrainSettings:
    iterations: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (1000, 1500)
    gamma: float = 0.1
    p: int = 4
    k: int = 4
    frames: int = 30
    margin: float = 0.2
    beta: float = 1.0
    log_every: int = 50


def _producer(seqs, labels, settings: TrainSettings, seed: int, out: queue.Queue, stop: threading.Event):
    rng = np.random.default_rng(seed)
    sampler = PKSampler(labels, settings.p, settings.k, rng)
    for _ in range(settings.iterations):
        idx = sampler.sample()
        batch = np.stack([frame_window(seqs[i].frames, settings.frames, rng) for i in idx])
        while not stop.is_set():
            try:
                out.put((batch, labels[idx]), timeout=0.1)
                break
            except queue.Full:
                continue
        if stop.is_set():
            return


def train(net: Network, seqs: list[GaitSequence], settings: TrainSettings, seed: int = 0,
          on_log=None) -> list[dict]:
    """Train in place; returns one row of loss terms per iteration."""
    names = sorted({s.identity for s in seqs})
    index = {n: i for i, n in enumerate(names)}
    labels = np.array([index[s.identity] for s in seqs])
    if len(names) > net.cfg.num_classes:
        raise ValueError(f"{len(names)} identities exceed the classifier's {net.cfg.num_classes} classes")
    PKSampler(labels, settings.p, settings.k, np.random.default_rng(0))
    opt = SGD(net.parameters(), settings.lr, settings.momentum, settings.weight_decay, settings.milestones,
              settings.gamma)
    batches: queue.Queue = queue.Queue(maxsize=2)
    stop = threading.Event()
    worker = threading.Thread(target=_producer, args=(seqs, labels, settings, seed, batches, stop), daemon=True)
    worker.start()
    net.train()
    rows = []
    try:
        for it in range(settings.iterations):
            x, y = batches.get()
            net.zero_grad()
            with GradTape() as tape:
                res = net(x)
                loss, rep = combined_loss(res.embeddings, res.logits, y, settings.margin, settings.beta)
            tape.backward(loss, net.parameters())
            if not np.isfinite(rep.total):
                raise FloatingPointError(f"loss diverged at iteration {it}")
            opt.step(it)
            row = {"iteration": it, "lr": opt.lr_at(it), "loss": rep.total, "triplet": rep.triplet,
                   "ce": rep.ce, "active": rep.active_fraction}
            rows.append(row)
            if on_log is not None:
                on_log(row)
            if it % settings.log_every == 0:
                log.info("iter %d loss %.4f tri %.4f ce %.4f", it, rep.total, rep.triplet, rep.ce)
    finally:
        stop.set()
        worker.join()
    net.eval()
    return rows


def embed(net: Network, seqs: list[GaitSequence], batch: int = 4) -> np.ndarray:
    """Eval-mode retrieval vectors using every frame of each sequence."""
    net.eval()
    out = []
    with no_tape():
        for i in range(0, len(seqs), batch):
            chunk = seqs[i:i + batch]
            lengths = {len(s) for s in chunk}
            if len(lengths) == 1:
                out.append(net(np.stack([s.frames for s in chunk])).retrieval_vectors())
            else:
                out.extend(net(s.frames[None]).retrieval_vectors() for s in chunk)
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def evaluate(net: Network, gallery: list[GaitSequence], probes: list[GaitSequence]) -> RetrievalMetrics:
    g = embed(net, gallery)
    p = embed(net, probes)
    return retrieval_eval(p, [s.identity for s in probes], g, [s.identity for s in gallery])
