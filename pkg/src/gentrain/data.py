"""Samples, provenance and the columnar Dataset container."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_FORMAT = "gentrain-dataset"
DATASET_VERSION = 1

RANDOM = "generated_random"
HSM = "generated_hsm"
REAL = "real"
KINDS = (RANDOM, HSM, REAL)


@dataclass(frozen=True)
class Provenance:
    kind: str
    step: int = -1  # HSM step count; -1 when not mined

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown provenance kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind}({self.step})" if self.kind == HSM else self.kind


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    provenance: Provenance


class Dataset:
    """Ordered, capacity-bounded collection of labelled samples.

    Stored column-wise (``x``, ``y``, provenance kind/step and a per-item
    ``uid``) so mini-batching is a cheap fancy-index. ``uid`` identifies an
    item across smoothing updates; it is how survival is measured.
    """

    def __init__(self, x, y, kind, step=None, uid=None, capacity: int | None = None,
                 n_classes: int | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, 0)
        if x.shape[0] != len(y):
            raise ValueError(f"dataset: {x.shape[0]} inputs but {len(y)} labels")
        self.x = x
        self.y = np.asarray(y, dtype=np.int64)
        n = len(self.y)
        self.kind = np.asarray(kind, dtype="<U16").reshape(n) if n else np.zeros(0, dtype="<U16")
        self.step = np.full(n, -1, dtype=np.int64) if step is None else np.asarray(step, dtype=np.int64)
        self.uid = np.arange(n, dtype=np.int64) if uid is None else np.asarray(uid, dtype=np.int64)
        self.capacity = n if capacity is None else int(capacity)
        self.n_classes = int(self.y.max() + 1 if n else 0) if n_classes is None else int(n_classes)
        if n > self.capacity:
            raise ValueError(f"dataset of {n} items exceeds capacity {self.capacity}")
        bad = set(np.unique(self.kind)) - set(KINDS)
        if bad:
            raise ValueError(f"unknown provenance kinds {sorted(bad)}")

    @classmethod
    def empty(cls, dim: int, capacity: int, n_classes: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), [], capacity=capacity,
                   n_classes=n_classes)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), Provenance(str(self.kind[i]), int(self.step[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.kind[idx], self.step[idx], self.uid[idx],
                       capacity=self.capacity, n_classes=self.n_classes)

    def extend(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
                       np.concatenate([self.kind, other.kind]), np.concatenate([self.step, other.step]),
                       np.concatenate([self.uid, other.uid]), capacity=self.capacity,
                       n_classes=self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def provenance_counts(self) -> dict[str, int]:
        return {k: int((self.kind == k).sum()) for k in KINDS}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.y, self.step, self.uid):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\0".join(self.kind.tolist()).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write an ``.npz`` with columns ``x, y, kind, step, uid`` plus header fields."""
        with open(path, "wb") as fh:
            np.savez(fh, format=np.array(DATASET_FORMAT), version=np.array(DATASET_VERSION),
                     capacity=np.array(self.capacity), n_classes=np.array(self.n_classes),
                     x=self.x, y=self.y, kind=self.kind, step=self.step, uid=self.uid)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(Path(path), allow_pickle=False) as z:
            if str(z["format"]) != DATASET_FORMAT:
                raise ValueError(f"{path}: not a dataset file")
            if int(z["version"]) != DATASET_VERSION:
                raise ValueError(f"{path}: unsupported dataset version {int(z['version'])}")
            return cls(z["x"], z["y"], z["kind"], z["step"], z["uid"],
                       capacity=int(z["capacity"]), n_classes=int(z["n_classes"]))


class UidCounter:
    """Hands out fresh item ids for one dataset lineage."""

    def __init__(self, start: int = 0):
        self.next = start

    def take(self, n: int) -> np.ndarray:
        out = np.arange(self.next, self.next + n, dtype=np.int64)
        self.next += n
        return out
