"""Batch-norm statistics adaptation.

Re-estimates the running moments of every BN layer from unlabeled target
data by running train-mode forward passes with no tape, so no gradient is
ever formed and the learned parameters stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .data import Dataset
from .nn import BatchNorm, Classifier


def _inputs(data) -> np.ndarray:
    # labels are deliberately never looked at
    return data.x if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


def adapt_bn_statistics(clf: Classifier, unlabeled, passes: int = 5, batch_size: int = 64,
                        alpha: float | None = None, reset: bool = False, shuffle: bool = True,
                        rng: np.random.Generator | None = None) -> dict:
    """Update running BN moments in place from ``unlabeled`` inputs.

    ``alpha`` overrides every layer's update factor for the duration;
    ``reset`` restarts the running moments at (0, 1) first instead of
    continuing from the training estimates. Returns per-layer moments
    before and after.
    """
    x = _inputs(unlabeled)
    n = len(x)
    if passes < 1:
        raise ValueError("adapt_bn_statistics: passes must be >= 1")
    if n < 2:
        raise ValueError(f"adapt_bn_statistics: need at least 2 samples, got {n}")
    m = min(batch_size, n)
    if m < 2:
        raise ValueError("adapt_bn_statistics: batch size must be >= 2")
    rng = np.random.default_rng(0) if rng is None else rng

    layers = clf.bn_layers
    before = [_moments(bn) for bn in layers]
    saved_alpha = [bn.alpha for bn in layers]
    if reset:
        for bn in layers:
            bn.running_mean = np.zeros(bn.width)
            bn.running_var = np.ones(bn.width)
    try:
        if alpha is not None:
            if not 0 < alpha < 1:
                raise ValueError(f"adapt_bn_statistics: alpha must lie in (0, 1), got {alpha}")
            for bn in layers:
                bn.alpha = float(alpha)
        if Tape.active() is not None:
            raise RuntimeError("adapt_bn_statistics must not run under an active Tape")
        for _ in range(passes):
            order = rng.permutation(n) if shuffle else np.arange(n)
            for start in range(0, n, m):
                idx = order[start:start + m]
                if len(idx) < 2:
                    break
                clf.logits(x[idx], training=True)
    finally:
        for bn, a in zip(layers, saved_alpha):
            bn.alpha = a
    after = [_moments(bn) for bn in layers]
    return {"before": before, "after": after}


def _moments(bn: BatchNorm) -> dict:
    return {"running_mean": bn.running_mean.copy(), "running_var": bn.running_var.copy()}


def bn_inputs(clf: Classifier, x) -> list[np.ndarray]:
    """Eval-mode activations entering each BN layer, in order."""
    h = np.asarray(x, dtype=np.float64)
    out = []
    for layer in clf.layers:
        if isinstance(layer, BatchNorm):
            out.append(h)
        h = layer.forward(h, training=False).values
    return out


def bn_shift_report(clf: Classifier, generated, real) -> list[dict]:
    """Per BN layer, how far real-input activation moments sit from generated ones.

    ``mean_shift`` is the unit-averaged ``|mu_g - mu_r| / pooled std``;
    ``log_var_ratio`` the unit-averaged ``|log(var_r / var_g)|``.
    """
    xg, xr = _inputs(generated), _inputs(real)
    if len(xg) == 0 or len(xr) == 0:
        raise ValueError("bn_shift_report: both sets must be nonempty")
    report = []
    for i, (ag, ar) in enumerate(zip(bn_inputs(clf, xg), bn_inputs(clf, xr))):
        mg, mr = ag.mean(axis=0), ar.mean(axis=0)
        vg, vr = ag.var(axis=0), ar.var(axis=0)
        pooled = np.sqrt(0.5 * (vg + vr) + 1e-12)
        report.append({
            "layer": i,
            "mean_shift": float(np.mean(np.abs(mg - mr) / pooled)),
            "log_var_ratio": float(np.mean(np.abs(np.log((vr + 1e-12) / (vg + 1e-12))))),
        })
    return report
