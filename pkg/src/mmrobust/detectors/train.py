"""Minibatch training for fusion detectors."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..autograd import Graph
from ..corpus import Dataset
from ..errors import ValidationError
from ..rng import make_rng
from .model import DetectorConfig, DetectorParams, forward, init_params, per_sample_ce

log = logging.getLogger(__name__)

# batch_hook(params, images, texts, labels, rng) -> (images, texts, labels) actually trained on,
# optionally with a fourth entry: an embedding perturbation [n, L, e] for the returned texts.
BatchHook = Callable[[DetectorParams, np.ndarray, list, np.ndarray, np.random.Generator], tuple]


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    first_batch_loss: float | None = None
    wall_time: float = 0.0

    @property
    def final_train_loss(self) -> float | None:
        return self.epochs[-1]["train_loss"] if self.epochs else None


class Adam:
    """Adam with optional decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                step += self.lr * self.wd * params[k]
            params[k] -= step.astype(np.float32)


class SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= (self.lr * g).astype(np.float32)


def _event_index(train_set: Dataset) -> int:
    return int(train_set.events.max()) + 1 if len(train_set) else 0


def evaluate(params: DetectorParams, ds: Dataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on ``ds``."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    z = params.logits(ds.images, ds.texts)
    y = ds.labels
    loss = float(per_sample_ce(z, y).astype(np.float64).mean())
    acc = float(np.mean((z[:, 1] >= z[:, 0]).astype(np.int64) == y))
    return loss, acc


def train_step(params: DetectorParams, optimizer, images, texts, labels, events,
               dropout_rng: np.random.Generator | None, embed_delta: np.ndarray | None = None) -> tuple[float, int]:
    """One optimizer step; returns (batch mean loss, correct predictions in batch)."""
    ids, lengths = params.encode(texts)
    g = Graph()
    fwd = forward(g, params, images, ids, lengths, dropout_rng=dropout_rng, embed_delta=embed_delta)
    loss = g.softmax_ce(fwd.logits, labels)
    if fwd.event_logits is not None:
        loss = g.add(loss, g.softmax_ce(fwd.event_logits, events))
    g.backward(loss)
    grads = {k: t.grad for k, t in fwd.leaves.items() if t.grad is not None}
    optimizer.step(params.weights, grads)
    z = fwd.logits.data
    correct = int(np.sum((z[:, 1] >= z[:, 0]).astype(np.int64) == labels))
    return float(loss.data), correct


def fit(params: DetectorParams, train_set: Dataset, epochs: int, *, val_set: Dataset | None = None,
        stream: str = "train", batch_hook: Optional[BatchHook] = None, lr: float | None = None) -> TrainReport:
    """Run ``epochs`` epochs of minibatch training on ``params`` in place."""
    cfg = params.config
    report = TrainReport()
    if epochs == 0:
        return report
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    lr = cfg.lr if lr is None else lr
    optimizer = Adam(params.weights, lr, weight_decay=cfg.weight_decay) if cfg.optimizer == "adam" else SGD(params.weights, lr)
    images, texts, labels, events = train_set.images, train_set.texts, train_set.labels, train_set.events
    if cfg.event_head and events.max() >= params.n_events:
        raise ValidationError(f"event id {events.max()} exceeds event head size {params.n_events}")
    n = len(train_set)
    seed = params.train_seed
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = make_rng(seed, stream, "shuffle", epoch).permutation(n)
        drop_rng = make_rng(seed, stream, "dropout", epoch)
        hook_rng = make_rng(seed, stream, "hook", epoch)
        losses, correct, seen = [], 0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            bx, bt, by, be = images[idx], [texts[i] for i in idx], labels[idx], events[idx]
            delta = None
            if batch_hook is not None:
                out = batch_hook(params, bx, bt, by, hook_rng)
                bx, bt, by = out[:3]
                delta = out[3] if len(out) > 3 else None
                be = np.concatenate([be] * (len(by) // len(idx))) if len(by) != len(idx) else be
            loss, ok = train_step(params, optimizer, bx, bt, by, be, drop_rng if cfg.dropout > 0 else None, delta)
            if report.first_batch_loss is None:
                report.first_batch_loss = loss
            losses.append(loss * len(by))
            correct += ok
            seen += len(by)
        row = {"epoch": epoch + 1, "train_loss": float(np.sum(losses) / seen), "train_acc": correct / seen}
        if val_set is not None and len(val_set):
            row["val_loss"], row["val_acc"] = evaluate(params, val_set)
        report.epochs.append(row)
        log.debug("epoch %d %s", epoch + 1, row)
    report.wall_time = time.perf_counter() - t0
    return report


def train(cfg: DetectorConfig, train_set: Dataset, val_set: Dataset | None = None,
          epochs: int | None = None) -> tuple[DetectorParams, TrainReport]:
    """Initialise a detector from ``cfg`` and train it on ``train_set``."""
    if val_set is not None and set(train_set.event_ids()) & set(val_set.event_ids()):
        raise ValidationError("train and validation sets share events")
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    shape = tuple(train_set.samples[0].image.shape)
    params = init_params(cfg, train_set.alphabet, shape, n_events=_event_index(train_set) if cfg.event_head else 0)
    report = fit(params, train_set, cfg.epochs if epochs is None else epochs, val_set=val_set)
    return params, report
