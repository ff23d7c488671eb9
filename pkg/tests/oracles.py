"""Independent reference computations used by several test modules.

These deliberately re-derive results with plain numpy instead of calling the
package's forward passes, so a bug in the package cannot hide in its oracle.
"""

from __future__ import annotations

import numpy as np

from gentrain.nn import BatchNorm, Classifier, DenseLayer


def train_mode_bn_moments(clf: Classifier, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(mean, biased var) of the input to every BN layer when ``x`` is one train-mode batch."""
    h = np.asarray(x, dtype=np.float64)
    out = []
    for layer in clf.layers:
        if isinstance(layer, DenseLayer):
            h = h @ layer.weight.values.T + layer.bias.values
        elif isinstance(layer, BatchNorm):
            mu = h.sum(axis=0) / len(h)
            var = ((h - mu) ** 2).sum(axis=0) / len(h)
            out.append((mu, var))
            h = (h - mu) / np.sqrt(var + layer.eps) * layer.gamma.values + layer.beta.values
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        else:
            h = np.tanh(h)
    return out


def within(estimate: np.ndarray, truth: np.ndarray, scale: np.ndarray, rel: float) -> bool:
    return bool(np.all(np.abs(estimate - truth) <= rel * scale))
