"""Mini-batch SGD for the classifier, plus evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .nn import BatchNorm, Classifier, cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("train: epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("train: batch_size must be >= 2 (batch norm needs batch moments)")
        if not self.lr >= 0:
            raise ValueError("train: lr must be non-negative")


def lr_at(epoch: int, epochs: int, lr0: float = 0.1) -> float:
    """Step decay: ``lr0`` for the first half, ``lr0/10`` to three quarters, ``lr0/100`` after."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epoch < 0.5 * epochs:
        return lr0
    if epoch < 0.75 * epochs:
        return lr0 / 10
    return lr0 / 100


class SGD:
    """Momentum SGD: ``v <- mu*v + g + wd*p``, ``p <- p - lr*v``.

    Parameters listed in ``no_decay`` (BN gamma/beta) skip the weight decay term.
    """

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4,
                 no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._no_decay = {id(p) for p in no_decay}
        self.velocity = [np.zeros_like(p.values) for p in self.params]
        self.skipped_steps = 0

    @classmethod
    def for_classifier(cls, clf: Classifier, cfg: TrainConfig) -> "SGD":
        bn_params = [t for layer in clf.layers if isinstance(layer, BatchNorm)
                     for t in layer.params().values()]
        return cls(clf.params(), lr=cfg.lr, momentum=cfg.momentum,
                   weight_decay=cfg.weight_decay, no_decay=bn_params)

    def step(self) -> bool:
        grads = [np.zeros_like(p.values) if p.grad is None else p.grad for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            self.skipped_steps += 1
            log.warning("sgd: non-finite gradient, step skipped (%d so far)", self.skipped_steps)
            return False
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay and id(p) not in self._no_decay:
                g = g + self.weight_decay * p.values
            v *= self.momentum
            v += g
            p.values = p.values - self.lr * v
        return True


def train_epoch(clf: Classifier, dataset: Dataset, opt: SGD, rng: np.random.Generator,
                batch_size: int = 64) -> float:
    """One shuffled pass; returns the mean mini-batch loss.

    A trailing batch shorter than 2 is dropped (batch norm needs batch moments).
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        with ad.Tape():
            loss = cross_entropy(clf.logits(dataset.x[idx], training=True), dataset.y[idx])
        clf.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def evaluate(clf: Classifier, dataset: Dataset, batch_size: int = 2048) -> float:
    """Top-1 accuracy in eval mode; never touches parameters or BN statistics."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        pred = clf.predict(dataset.x[start:start + batch_size])
        correct += int((pred == dataset.y[start:start + batch_size]).sum())
    return correct / len(dataset)


class Trainer:
    """Bundles an optimizer, schedule and shuffle stream for one classifier."""

    def __init__(self, clf: Classifier, cfg: TrainConfig, rng: np.random.Generator):
        self.clf = clf
        self.cfg = cfg
        self.rng = rng
        self.opt = SGD.for_classifier(clf, cfg)
        self.epoch = 0

    def train_epoch(self, dataset: Dataset, lr: float | None = None) -> float:
        if lr is None:
            lr = lr_at(min(self.epoch, self.cfg.epochs - 1), self.cfg.epochs, self.cfg.lr)
        self.opt.lr = lr
        loss = train_epoch(self.clf, dataset, self.opt, self.rng, self.cfg.batch_size)
        self.epoch += 1
        return loss


def train_fixed(clf: Classifier, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                on_epoch=None) -> list[dict]:
    """Plain training for ``cfg.epochs`` epochs on an unchanging dataset."""
    trainer = Trainer(clf, cfg, rng)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr)
        loss = trainer.train_epoch(dataset, lr)
        rec = {"epoch": epoch, "lr": lr, "train_loss": loss, "turnover": 0}
        if on_epoch is not None:
            on_epoch(rec, clf)
        history.append(rec)
    return history
