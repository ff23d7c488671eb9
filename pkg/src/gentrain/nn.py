"""Classifier building blocks: dense layers, batch norm, softmax scores, cross-entropy."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "gentrain-classifier"
CHECKPOINT_VERSION = 1

DEFAULT_BN_ALPHA = 0.1
DEFAULT_BN_EPS = 1e-5


class DenseLayer:
    """Affine map ``x @ W.T + b`` with weight ``[out x in]``."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"dense: weight {weight.shape} and bias {bias.shape} disagree")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "DenseLayer":
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        return cls(w, np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def spec(self) -> dict:
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class BatchNorm:
    """Batch normalization over the feature axis of ``[m x width]`` inputs.

    Train mode normalizes with the biased batch moments and updates the
    running moments as ``run <- alpha * batch + (1 - alpha) * run``.
    Eval mode normalizes with the running moments and changes nothing.
    """

    kind = "batchnorm"

    def __init__(self, width: int, eps: float = DEFAULT_BN_EPS, alpha: float = DEFAULT_BN_ALPHA):
        if not eps > 0:
            raise ValueError(f"batchnorm: eps must be positive, got {eps}")
        if not 0 < alpha < 1:
            raise ValueError(f"batchnorm: alpha must lie in (0, 1), got {alpha}")
        self.width = width
        self.eps = float(eps)
        self.alpha = float(alpha)
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, h: Tensor, training: bool) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.width:
            raise ad.ShapeError(f"batchnorm: expected [m x {self.width}], got {h.shape}")
        if training:
            m = h.shape[0]
            if m < 2:
                raise ValueError(f"batchnorm: train mode needs a batch of at least 2, got {m}")
            mu = ad.reduce_mean(h, axis=0, keepdims=True)
            var = ad.reduce_var(h, axis=0, keepdims=True, biased=True)
            self.update_running(mu.values[0], var.values[0])
            inv_std = ad.exp(ad.scalar_scale(ad.log(ad.add(var, self.eps)), -0.5))
            normed = ad.multiply(ad.subtract(h, mu), inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = ad.multiply(ad.subtract(h, self.running_mean), inv_std)
        return ad.add(ad.multiply(normed, self.gamma), self.beta)

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray,
                       alpha: float | None = None) -> None:
        a = self.alpha if alpha is None else alpha
        self.running_mean = a * batch_mean + (1.0 - a) * self.running_mean
        self.running_var = a * batch_var + (1.0 - a) * self.running_var

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def stats(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self) -> dict:
        return {"kind": self.kind, "width": self.width, "eps": self.eps, "alpha": self.alpha}


class ReLU:
    kind = "relu"

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ad.relu(x)

    def params(self) -> dict[str, Tensor]:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind}


class Tanh(ReLU):
    kind = "tanh"

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ad.tanh(x)


_ACTIVATIONS = {"relu": ReLU, "tanh": Tanh}


@dataclass
class Classifier:
    """Ordered stack of layers ending in a ``K``-wide dense layer.

    ``logits`` returns raw scores; :meth:`scores` the softmax probabilities.
    """

    layers: list
    n_classes: int
    _bn: list = field(init=False, repr=False)

    def __post_init__(self):
        dense = [l for l in self.layers if isinstance(l, DenseLayer)]
        if not dense or dense[-1].n_out != self.n_classes:
            raise ValueError("classifier: final dense layer width must equal the class count")
        self._bn = [l for l in self.layers if isinstance(l, BatchNorm)]

    @classmethod
    def build(cls, in_dim: int, n_classes: int, hidden=(64, 64), rng=None,
              activation: str = "relu", batchnorm: bool = True,
              bn_alpha: float = DEFAULT_BN_ALPHA, bn_eps: float = DEFAULT_BN_EPS) -> "Classifier":
        rng = np.random.default_rng(0) if rng is None else rng
        layers = []
        width = in_dim
        for h in hidden:
            layers.append(DenseLayer.init(width, h, rng))
            if batchnorm:
                layers.append(BatchNorm(h, eps=bn_eps, alpha=bn_alpha))
            layers.append(_ACTIVATIONS[activation]())
            width = h
        layers.append(DenseLayer.init(width, n_classes, rng))
        return cls(layers, n_classes)

    @property
    def in_dim(self) -> int:
        return next(l for l in self.layers if isinstance(l, DenseLayer)).n_in

    @property
    def bn_layers(self) -> list[BatchNorm]:
        return self._bn

    def logits(self, x, training: bool = False) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ad.ShapeError(f"classifier: expected [m x {self.in_dim}] input, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def scores(self, x, training: bool = False) -> np.ndarray:
        """Softmax probabilities per row (no graph is kept)."""
        z = self.logits(x, training).values
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return ad.max_index_stopgrad(self.logits(x, training=False), axis=1)

    # -- parameter bookkeeping

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.params().items():
                out[f"{i}.{name}"] = t
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def named_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                for name, arr in layer.stats().items():
                    out[f"{i}.{name}"] = arr
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def theta_hash(self) -> str:
        return _hash_arrays((k, t.values) for k, t in self.named_params().items())

    def omega_hash(self) -> str:
        return _hash_arrays(self.named_stats().items())

    def copy(self) -> "Classifier":
        return from_dict(to_dict(self))


def _hash_arrays(items) -> str:
    h = hashlib.sha256()
    for name, arr in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def log_softmax(logits: Tensor) -> Tensor:
    logits = ad.as_tensor(logits)
    shift = logits.values.max(axis=1, keepdims=True)  # constant: no gradient
    z = ad.subtract(logits, shift)
    return ad.subtract(z, ad.log(ad.reduce_sum(ad.exp(z), axis=1, keepdims=True)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[k]`` over rows, computed from logits."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, k = logits.shape
    if labels.shape[0] != m:
        raise ad.ShapeError(f"cross_entropy: {m} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got {labels.min()}..{labels.max()}")
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    picked = ad.reduce_sum(ad.multiply(log_softmax(logits), onehot), axis=1)
    return ad.scalar_scale(ad.reduce_mean(picked), -1.0)


def cross_entropy_from_scores(scores: np.ndarray, k: int) -> float:
    """``-log scores[k]`` for a single probability vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k < scores.shape[-1]:
        raise ValueError(f"cross_entropy: class {k} out of range for {scores.shape[-1]} classes")
    return float(-np.log(scores[k]))


# ---------------------------------------------------------------- checkpoints


def to_dict(clf: Classifier) -> dict:
    layers = []
    for layer in clf.layers:
        entry = layer.spec()
        if isinstance(layer, DenseLayer):
            entry["weight"] = layer.weight.values.tolist()
            entry["bias"] = layer.bias.values.tolist()
        elif isinstance(layer, BatchNorm):
            entry["gamma"] = layer.gamma.values.tolist()
            entry["beta"] = layer.beta.values.tolist()
            entry["running_mean"] = layer.running_mean.tolist()
            entry["running_var"] = layer.running_var.tolist()
        layers.append(entry)
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "n_classes": clf.n_classes, "layers": layers}


def from_dict(d: dict) -> Classifier:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a classifier checkpoint: format={d.get('format')!r}")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    layers = []
    for entry in d["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            layers.append(DenseLayer(np.array(entry["weight"]), np.array(entry["bias"])))
        elif kind == "batchnorm":
            bn = BatchNorm(entry["width"], eps=entry["eps"], alpha=entry["alpha"])
            bn.gamma.values = np.array(entry["gamma"], dtype=np.float64)
            bn.beta.values = np.array(entry["beta"], dtype=np.float64)
            bn.running_mean = np.array(entry["running_mean"], dtype=np.float64)
            bn.running_var = np.array(entry["running_var"], dtype=np.float64)
            layers.append(bn)
        elif kind in _ACTIVATIONS:
            layers.append(_ACTIVATIONS[kind]())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Classifier(layers, d["n_classes"])


def save_checkpoint(clf: Classifier, path) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr, so
    save -> load -> save is byte-identical."""
    Path(path).write_text(json.dumps(to_dict(clf), sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> Classifier:
    return from_dict(json.loads(Path(path).read_text()))
