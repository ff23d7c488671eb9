"""A synthetic stand-in for a pretrained conditional generator and its real domain.

The generator is a frozen two-layer tanh map ``G(h, y)`` with a per-class
embedding. "Real" data are drawn from the same generator with an untruncated
latent prior, then pushed through a fixed per-dimension affine shift and a
little Gaussian noise. Training data come from the truncated prior, so the
learner sees less diversity than the test domain and a small covariate shift.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import RANDOM, REAL, Dataset, Provenance, Sample
from .seeding import stream

WORLD_DUMP_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 10
    latent_dim: int = 16
    obs_dim: int = 64
    hidden_dim: int = 48
    truncation: float = 0.5
    real_noise_sigma: float = 0.05
    perturb_scale_range: tuple[float, float] = (0.9, 1.1)
    perturb_shift_range: tuple[float, float] = (-0.1, 0.1)
    master_seed: int = 0
    # generator weight scales
    latent_gain: float = 1.5
    embed_gain: float = 0.4
    output_gain: float = 1.5

    def __post_init__(self):
        for name in ("n_classes", "latent_dim", "obs_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"world: {name} must be positive")
        if not self.truncation > 0:
            raise ValueError("world: truncation must be positive")
        if self.real_noise_sigma < 0:
            raise ValueError("world: real_noise_sigma must be non-negative")
        object.__setattr__(self, "perturb_scale_range", tuple(map(float, self.perturb_scale_range)))
        object.__setattr__(self, "perturb_shift_range", tuple(map(float, self.perturb_shift_range)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["perturb_scale_range"] = list(self.perturb_scale_range)
        d["perturb_shift_range"] = list(self.perturb_shift_range)
        return d


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class World:
    """Frozen generator plus the real-domain perturbation (``scale``, ``shift``)."""

    def __init__(self, config: WorldConfig, w1, embed, w2, b2, scale, shift):
        self.config = config
        self.w1 = _frozen(w1)          # [hidden x latent]
        self.embed = _frozen(embed)    # [K x hidden]
        self.w2 = _frozen(w2)          # [obs x hidden]
        self.b2 = _frozen(b2)          # [obs]
        self.scale = _frozen(scale)    # [obs]
        self.shift = _frozen(shift)    # [obs]

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.w1, self.embed, self.w2, self.b2, self.scale, self.shift):
            h.update(a.tobytes())
        return h.hexdigest()

    def check_labels(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"label out of range for {self.n_classes} classes: {y.min()}..{y.max()}")
        return y

    def generator(self, h, y) -> Tensor:
        """Differentiable ``G(h, y)`` for a batch ``h [m x latent_dim]``."""
        h = ad.as_tensor(h)
        y = self.check_labels(y)
        if h.ndim != 2 or h.shape[1] != self.latent_dim:
            raise ad.ShapeError(f"generator: expected [m x {self.latent_dim}] latents, got {h.shape}")
        if len(y) != h.shape[0]:
            raise ad.ShapeError(f"generator: {h.shape[0]} latents but {len(y)} labels")
        pre = ad.add(ad.matmul(h, self.w1.T), self.embed[y])
        return ad.tanh(ad.add(ad.matmul(ad.tanh(pre), self.w2.T), self.b2))

    def generate_batch(self, h: np.ndarray, y) -> np.ndarray:
        return self.generator(np.asarray(h, dtype=np.float64), y).values

    def generate(self, h, y: int, provenance: Provenance | None = None) -> Sample:
        h = np.asarray(h, dtype=np.float64).reshape(1, -1)
        x = self.generate_batch(h, [y])[0]
        return Sample(x, int(y), provenance or Provenance(RANDOM))

    def sample_latent(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Standard-normal coordinates, each redrawn until ``|value| <= truncation``."""
        shape = (self.latent_dim,) if n is None else (n, self.latent_dim)
        return truncated_normal(rng, shape, self.config.truncation)

    def perturb(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(0.0, 1.0, size=x.shape) * self.config.real_noise_sigma
        return self.scale * x + self.shift + noise

    def sample_real_batch(self, y, rng: np.random.Generator) -> np.ndarray:
        y = self.check_labels(y)
        h = rng.normal(size=(len(y), self.latent_dim))
        return self.perturb(self.generate_batch(h, y), rng)

    def sample_real(self, y: int, rng: np.random.Generator) -> Sample:
        return Sample(self.sample_real_batch([y], rng)[0], int(y), Provenance(REAL))

    def save(self, path) -> None:
        """Dump weights to ``.npz``: w1 [hidden x latent], embed [K x hidden],
        w2 [obs x hidden], b2, scale, shift [obs]; plus ``version``."""
        with open(path, "wb") as fh:
            np.savez(fh, version=np.array(WORLD_DUMP_VERSION), w1=self.w1, embed=self.embed,
                     w2=self.w2, b2=self.b2, scale=self.scale, shift=self.shift)


def truncated_normal(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    out = rng.normal(size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def build_world(config: WorldConfig | None = None) -> World:
    config = config or WorldConfig()
    rng = stream(config.master_seed, "world")
    c = config
    w1 = rng.normal(0.0, c.latent_gain / np.sqrt(c.latent_dim), size=(c.hidden_dim, c.latent_dim))
    embed = rng.normal(0.0, c.embed_gain, size=(c.n_classes, c.hidden_dim))
    w2 = rng.normal(0.0, c.output_gain / np.sqrt(c.hidden_dim), size=(c.obs_dim, c.hidden_dim))
    b2 = rng.normal(0.0, 0.1, size=c.obs_dim)
    scale = rng.uniform(*c.perturb_scale_range, size=c.obs_dim)
    shift = rng.uniform(*c.perturb_shift_range, size=c.obs_dim)
    return World(config, w1, embed, w2, b2, scale, shift)


def make_real_splits(world: World, train_per_class: int, test_per_class: int,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified real train/test sets drawn from disjoint streams."""
    if train_per_class < 1 or test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    out = []
    for purpose, per_class in (("real-train", train_per_class), ("real-test", test_per_class)):
        rng = stream(seed, purpose)
        y = np.repeat(np.arange(world.n_classes), per_class)
        x = world.sample_real_batch(y, rng)
        out.append(Dataset(x, y, np.full(len(y), REAL), n_classes=world.n_classes))
    return out[0], out[1]
