"""Hard sample mining by gradient descent on latent codes.

For a code ``h0`` of class ``y`` the classifier's predicted class ``k*`` on
``G(h0, y)`` is fixed, then ``h`` takes ``steps`` plain gradient steps on the
``k*`` logit of ``C(G(h, y))``. After every step the code is rescaled back to
``||h0||`` so it stays on the shell the prior put it on. Only the code moves:
generator and classifier (including BN running statistics) are read-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import HSM, Provenance
from .nn import Classifier
from .world import World

log = logging.getLogger(__name__)

RESCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class HSMConfig:
    step_size: float = 0.05
    steps: int = 8
    recompute_target: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"hsm: step_size must be positive, got {self.step_size}")
        if self.steps < 0:
            raise ValueError(f"hsm: steps must be >= 0, got {self.steps}")


@dataclass
class LatentCode:
    h: np.ndarray
    y: int
    provenance: Provenance = field(default_factory=lambda: Provenance("generated_random"))


@dataclass
class MiningResult:
    """Batch mining output. ``logits`` holds the target logit per iterate
    (``[m x steps+1]``, post-rescale); ``pre_rescale`` the target logit right
    after each raw gradient step and ``path`` every iterate ``[m x steps+1 x d]``
    (both only when traced)."""

    h0: np.ndarray
    h: np.ndarray
    y: np.ndarray
    target: np.ndarray
    logits: np.ndarray
    pre_rescale: np.ndarray | None
    steps_taken: np.ndarray
    skipped: int = 0
    path: np.ndarray | None = None


def predicted_class(clf: Classifier, x) -> np.ndarray | int:
    """Argmax of the eval-mode scores, lowest index on ties."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    k = clf.predict(x.reshape(1, -1) if single else x)
    return int(k[0]) if single else k


def _target_logits(world: World, clf: Classifier, h, y):
    logits = clf.logits(world.generator(h, y), training=False)
    return logits


def mine_batch(h0: np.ndarray, y, world: World, clf: Classifier, cfg: HSMConfig,
               trace: bool = False) -> MiningResult:
    """Mine every row of ``h0 [m x latent_dim]`` independently.

    Rows are independent because eval-mode BN is a per-sample affine map, so
    the gradient of the summed target logits w.r.t. ``h`` splits by row.
    """
    h0 = np.array(h0, dtype=np.float64, ndmin=2)
    y = world.check_labels(y)
    m = h0.shape[0]
    norm0 = np.linalg.norm(h0, axis=1)
    active = norm0 > 0
    skipped = int((~active).sum())
    if skipped:
        log.warning("hsm: %d zero-norm code(s) returned unmined", skipped)

    first = _target_logits(world, clf, h0, y).values
    target = ad.max_index_stopgrad(first, axis=1)
    rows = np.arange(m)
    traj = np.empty((m, cfg.steps + 1))
    traj[:, 0] = first[rows, target]
    pre = np.full((m, cfg.steps), np.nan) if trace else None
    steps_taken = np.zeros(m, dtype=np.int64)
    path = np.repeat(h0[:, None, :], cfg.steps + 1, axis=1) if trace else None

    h = h0.copy()
    for j in range(cfg.steps):
        ht = ad.Tensor(h, requires_grad=True)
        with ad.Tape():
            logits = _target_logits(world, clf, ht, y)
            if cfg.recompute_target:
                target = ad.max_index_stopgrad(logits, axis=1)
            onehot = np.zeros(logits.shape)
            onehot[rows, target] = 1.0
            objective = ad.reduce_sum(ad.multiply(logits, onehot))
        ad.backward(objective)
        stepped = h - cfg.step_size * ht.grad
        norms = np.linalg.norm(stepped, axis=1)
        ok = active & (norms >= RESCALE_FLOOR)
        if trace:
            pre[ok, j] = _target_logits(world, clf, stepped[ok], y[ok]).values[
                np.arange(ok.sum()), target[ok]]
        h[ok] = stepped[ok] * (norm0[ok] / norms[ok])[:, None]
        steps_taken[ok] += 1
        # rows whose step collapsed the norm stop here and keep the last valid iterate
        active = ok
        traj[:, j + 1] = _target_logits(world, clf, h, y).values[rows, target]
        if trace:
            path[:, j + 1:] = h[:, None, :]
        if not active.any():
            traj[:, j + 2:] = traj[:, [j + 1]]
            break

    return MiningResult(h0=h0, h=h, y=y, target=target, logits=traj, pre_rescale=pre,
                        steps_taken=steps_taken, skipped=skipped, path=path)


def hsm_optimize(code: LatentCode, world: World, clf: Classifier, cfg: HSMConfig) -> LatentCode:
    res = mine_batch(code.h[None, :], [code.y], world, clf, cfg)
    return LatentCode(res.h[0], code.y, Provenance(HSM, cfg.steps))


@dataclass
class MiningStats:
    mean_logit_drop: float
    mean_score_drop: float
    changed_fraction: float
    mean_displacement: float
    count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def hsm_mining_stats(h0: np.ndarray, h: np.ndarray, y, clf: Classifier, world: World) -> MiningStats:
    """Summarise how far mining pushed a batch of codes."""
    h0 = np.array(h0, ndmin=2)
    h = np.array(h, ndmin=2)
    y = world.check_labels(y)
    if len(h0) == 0:
        return MiningStats(0.0, 0.0, 0.0, 0.0, 0)
    x0 = world.generate_batch(h0, y)
    x1 = world.generate_batch(h, y)
    z0 = clf.logits(x0).values
    z1 = clf.logits(x1).values
    s0 = clf.scores(x0)
    s1 = clf.scores(x1)
    rows = np.arange(len(y))
    k = ad.max_index_stopgrad(z0, axis=1)
    return MiningStats(
        mean_logit_drop=float(np.mean(z0[rows, k] - z1[rows, k])),
        mean_score_drop=float(np.mean(s0[rows, k] - s1[rows, k])),
        changed_fraction=float(np.mean(ad.max_index_stopgrad(z1, axis=1) != k)),
        mean_displacement=float(np.mean(np.linalg.norm(h - h0, axis=1))),
        count=len(y),
    )


def dump_mined(result: MiningResult, path) -> None:
    """Per-code record: h0, h_J, target class and target-logit trajectory (``.npz``)."""
    with open(path, "wb") as fh:
        np.savez(fh, h0=result.h0, h=result.h, y=result.y, target=result.target,
                 logits=result.logits, steps_taken=result.steps_taken)
