"""Building and evolving generated training sets.

* :func:`fill_dataset` draws ``M`` class-balanced samples, optionally mined.
* :func:`collect_hsm_dataset` grows a fixed-size set by alternating one
  training epoch with appending a batch of mined samples.
* :func:`ds_epoch_update` / :func:`train_with_ds` replace a fraction ``r`` of
  the set after every epoch (dataset smoothing).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import HSM, RANDOM, Dataset, UidCounter
from .hsm import HSMConfig, hsm_mining_stats, mine_batch
from .nn import Classifier
from .seeding import stream
from .trainer import TrainConfig, Trainer, lr_at
from .world import World

log = logging.getLogger(__name__)


def _round(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SmoothingConfig:
    replacement_fraction: float = 0.5
    use_hsm: bool = False
    epoch_size: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.replacement_fraction <= 1.0:
            raise ValueError(f"smoothing: r must lie in [0, 1], got {self.replacement_fraction}")
        if self.epoch_size < 1:
            raise ValueError("smoothing: epoch_size must be positive")


def balanced_counts(total: int, n_classes: int) -> np.ndarray:
    """``total // K`` per class; the remainder goes to the lowest class indices."""
    counts = np.full(n_classes, total // n_classes, dtype=np.int64)
    counts[: total % n_classes] += 1
    return counts


def round_robin(counts: np.ndarray) -> np.ndarray:
    """Interleave labels ``0, 1, ..., K-1, 0, 1, ...`` until every count is used."""
    counts = np.asarray(counts).copy()
    out = []
    while counts.sum():
        for k in range(len(counts)):
            if counts[k]:
                out.append(k)
                counts[k] -= 1
    return np.asarray(out, dtype=np.int64)


def generate_samples(labels, with_hsm: bool, world: World, rng: np.random.Generator,
                     clf: Classifier | None = None, hsm_cfg: HSMConfig | None = None,
                     uids: UidCounter | None = None, capacity: int | None = None,
                     stats: list | None = None) -> Dataset:
    """One sample per label: truncated latent, optionally mined against ``clf``, then ``G``.

    Latents are drawn identically whether or not mining is on, so zero-step
    mining reproduces the unmined samples exactly.
    """
    labels = world.check_labels(labels) if len(labels) else np.zeros(0, dtype=np.int64)
    n = len(labels)
    h = world.sample_latent(rng, n) if n else np.zeros((0, world.latent_dim))
    if with_hsm:
        if clf is None:
            raise ValueError("hard sample mining needs a classifier")
        hsm_cfg = hsm_cfg or HSMConfig()
        if n:
            res = mine_batch(h, labels, world, clf, hsm_cfg)
            if stats is not None:
                stats.append(hsm_mining_stats(h, res.h, labels, clf, world))
            h = res.h
        kind, step = HSM, hsm_cfg.steps
    else:
        kind, step = RANDOM, -1
    x = world.generate_batch(h, labels) if n else np.zeros((0, world.obs_dim))
    uid = (uids or UidCounter()).take(n)
    return Dataset(x, labels, np.full(n, kind), np.full(n, step), uid,
                   capacity=n if capacity is None else capacity, n_classes=world.n_classes)


def fill_dataset(M: int, with_hsm: bool, world: World, rng: np.random.Generator,
                 clf: Classifier | None = None, hsm_cfg: HSMConfig | None = None,
                 uids: UidCounter | None = None, capacity: int | None = None) -> Dataset:
    """``M`` samples, class-major order, ``M/K`` per class.

    When ``K`` does not divide ``M`` the remainder goes to the lowest classes.
    """
    counts = balanced_counts(M, world.n_classes)
    if M % world.n_classes:
        log.info("fill_dataset: %d not divisible by %d classes, counts %s", M, world.n_classes,
                 counts.tolist())
    labels = np.repeat(np.arange(world.n_classes), counts)
    return generate_samples(labels, with_hsm, world, rng, clf, hsm_cfg, uids, capacity)


def collect_hsm_dataset(world: World, trainer: Trainer, N: int, M: int | None = None,
                        hsm_cfg: HSMConfig | None = None, seed: int = 0) -> tuple[Dataset, Classifier]:
    """Grow a size-``N`` set: ``M`` random samples, then repeat
    {train ``trainer.clf`` one epoch; append up to ``M`` samples mined against it}
    until the set holds ``N`` items.

    Returns the set and the auxiliary classifier; the final classifier is
    trained from scratch on the set by the caller.
    """
    M = max(1, N // 10) if M is None else M
    if M >= N:
        raise ValueError(f"collect_hsm_dataset: need M < N, got M={M}, N={N}")
    uids = UidCounter()
    dataset = fill_dataset(M, False, world, stream(seed, "collect", 0), uids=uids, capacity=N)
    rounds = 0
    while len(dataset) < N:
        trainer.train_epoch(dataset, lr=trainer.cfg.lr)
        rounds += 1
        add = min(M, N - len(dataset))
        mined = fill_dataset(add, True, world, stream(seed, "collect", rounds), clf=trainer.clf,
                             hsm_cfg=hsm_cfg, uids=uids, capacity=N)
        dataset = dataset.extend(mined)
    log.debug("collect_hsm_dataset: %d rounds to reach %d items", rounds, N)
    return dataset, trainer.clf


def _stratified_keep(dataset: Dataset, keep: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random retained indices, drawn per class in proportion to class size."""
    counts = dataset.class_counts()
    n = len(dataset)
    quota = counts * keep / n
    base = np.floor(quota).astype(np.int64)
    short = keep - base.sum()
    if short:
        # largest fractional parts first, ties to the lower class
        order = np.lexsort((np.arange(len(quota)), -(quota - base)))
        base[order[:short]] += 1
    picked = []
    for k, q in enumerate(base):
        members = np.flatnonzero(dataset.y == k)
        if q:
            picked.append(rng.choice(members, size=q, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


def ds_epoch_update(dataset: Dataset, cfg: SmoothingConfig, world: World, rng: np.random.Generator,
                    clf: Classifier | None = None, hsm_cfg: HSMConfig | None = None,
                    uids: UidCounter | None = None, stats: list | None = None) -> Dataset:
    """Keep ``round((1-r)N)`` items, top up with fresh samples back to ``N``.

    With ``use_hsm`` the fresh part is ``round(rN/2)`` mined plus the rest
    random; otherwise all random. Fresh labels fill each class back to its
    balanced count and are interleaved round-robin across the two pools.
    """
    N = cfg.epoch_size
    if len(dataset) != N:
        raise ValueError(f"ds_epoch_update: dataset has {len(dataset)} items, expected {N}")
    r = cfg.replacement_fraction
    if r == 0:
        return dataset
    keep = _round((1.0 - r) * N)
    n_hsm = _round(r * N / 2) if cfg.use_hsm else 0
    n_hsm = min(n_hsm, N - keep)

    kept = dataset.take(_stratified_keep(dataset, keep, rng))
    deficit = balanced_counts(N, world.n_classes) - kept.class_counts()
    labels = round_robin(np.maximum(deficit, 0))
    uids = uids or UidCounter(int(dataset.uid.max()) + 1 if len(dataset) else 0)

    fresh = generate_samples(labels[:n_hsm], True, world, rng, clf, hsm_cfg, uids, N, stats) \
        if n_hsm else None
    random = generate_samples(labels[n_hsm:], False, world, rng, uids=uids, capacity=N)
    out = kept if fresh is None else kept.extend(fresh)
    return out.extend(random)


def train_with_ds(clf: Classifier, world: World, train_cfg: TrainConfig, smoothing: SmoothingConfig,
                  hsm_cfg: HSMConfig | None = None, seed: int = 0,
                  initial: Dataset | None = None, on_epoch=None) -> tuple[Classifier, list[dict]]:
    """Train for ``train_cfg.epochs`` epochs, smoothing the set after each one.

    With ``r = 0`` this is exactly fixed-dataset training: the smoothing
    stream is never consumed and the shuffle stream is shared.
    """
    uids = UidCounter()
    dataset = initial if initial is not None else fill_dataset(
        smoothing.epoch_size, False, world, stream(seed, "data"), uids=uids,
        capacity=smoothing.epoch_size)
    if initial is not None:
        uids = UidCounter(int(initial.uid.max()) + 1)
    trainer = Trainer(clf, train_cfg, stream(seed, "shuffle"))
    history = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.epochs, train_cfg.lr)
        loss = trainer.train_epoch(dataset, lr)
        rec = {"epoch": epoch, "lr": lr, "train_loss": loss, "turnover": 0}
        if smoothing.replacement_fraction > 0 and epoch < train_cfg.epochs - 1:
            before = set(dataset.uid.tolist())
            mstats: list = []
            dataset = ds_epoch_update(dataset, smoothing, world, stream(seed, "ds", epoch), clf,
                                      hsm_cfg, uids, mstats)
            rec["turnover"] = len(dataset) - len(before.intersection(dataset.uid.tolist()))
            if mstats:
                rec["hsm"] = mstats[0].to_dict()
        if on_epoch is not None:
            on_epoch(rec, clf)
        history.append(rec)
    return clf, history
