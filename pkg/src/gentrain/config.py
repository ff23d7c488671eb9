"""Experiment configuration: a nested YAML key-value file.

Every section and key is optional except those in ``REQUIRED``; anything not
given takes the default below. Unknown keys are rejected with their line and
column, and all missing required keys are reported together.

Example::

    seeds: [0, 1, 2, 3, 4]
    output_dir: runs/ablation
    world:
      master_seed: 0
      truncation: 0.5
    data:
      epoch_size: 2000
    train:
      epochs: 60
    methods:
      hsm: true
      ds: true
      bna: true
      replacement_fraction: 0.5
    sweep:
      r_grid: [0, 0.1, 0.2, 0.33, 0.5, 1]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .hsm import HSMConfig
from .trainer import TrainConfig
from .world import WorldConfig

CONFIG_VERSION = 1

REQUIRED = ("seeds", "world.master_seed", "data.epoch_size", "train.epochs")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierSpec:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    bn_alpha: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"classifier: unknown activation {self.activation!r}")


@dataclass(frozen=True)
class DataSpec:
    epoch_size: int = 2000
    collect_chunk: int | None = None   # samples appended per mining round; None -> epoch_size // 10
    real_train_per_class: int = 200
    real_test_per_class: int = 500

    def __post_init__(self):
        if self.epoch_size < 1 or self.real_train_per_class < 1 or self.real_test_per_class < 1:
            raise ValueError("data: sizes must be positive")


@dataclass(frozen=True)
class Methods:
    hsm: bool = False
    ds: bool = False
    bna: bool = False
    replacement_fraction: float = 0.5


@dataclass(frozen=True)
class BNASpec:
    passes: int = 5
    batch_size: int = 64
    alpha: float | None = None
    reset: bool = False


@dataclass(frozen=True)
class SweepSpec:
    r_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.33, 0.5, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "r_grid", tuple(float(r) for r in self.r_grid))
        if not self.r_grid or any(not 0 <= r <= 1 for r in self.r_grid):
            raise ValueError("sweep: r_grid must be a nonempty list of values in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    world: WorldConfig = field(default_factory=WorldConfig)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    hsm: HSMConfig = field(default_factory=HSMConfig)
    methods: Methods = field(default_factory=Methods)
    bna: BNASpec = field(default_factory=BNASpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must be a nonempty list")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of every setting except ``output_dir``; independent of key order in the file."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "world": WorldConfig,
    "classifier": ClassifierSpec,
    "data": DataSpec,
    "train": TrainConfig,
    "hsm": HSMConfig,
    "methods": Methods,
    "bna": BNASpec,
    "sweep": SweepSpec,
}
TOP_LEVEL = {"seeds", "output_dir", *SECTIONS}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _where(node, source: str) -> str:
    m = node.start_mark
    return f"{source}:{m.line + 1}:{m.column + 1}"


def _check_keys(root, source: str) -> None:
    if root is None:
        return
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{_where(root, source)}: top level must be a mapping")
    problems = []
    present = set()
    for key_node, value_node in root.value:
        key = key_node.value
        if key not in TOP_LEVEL:
            problems.append(f"{_where(key_node, source)}: unknown key {key!r}")
            continue
        present.add(key)
        if key in SECTIONS:
            if not isinstance(value_node, yaml.MappingNode):
                problems.append(f"{_where(value_node, source)}: section {key!r} must be a mapping")
                continue
            allowed = {f.name for f in dataclasses.fields(SECTIONS[key])}
            for sub_key, _ in value_node.value:
                if sub_key.value not in allowed:
                    problems.append(f"{_where(sub_key, source)}: unknown key {key}.{sub_key.value!r}")
                else:
                    present.add(f"{key}.{sub_key.value}")
    missing = [k for k in REQUIRED if k not in present]
    if missing:
        problems.append(f"{source}: missing required key(s): {', '.join(missing)}")
    if problems:
        raise ConfigError("\n".join(problems))


def _coerce(cls, values: dict) -> dict:
    # YAML 1.1 reads "1e-5" (no dot) as a string; accept it for float fields
    floats = {f.name for f in dataclasses.fields(cls) if isinstance(f.default, float)}
    out = dict(values)
    for k, v in values.items():
        if k in floats and isinstance(v, str):
            try:
                out[k] = float(v)
            except ValueError:
                pass
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in d.items():
        if key in SECTIONS:
            try:
                kwargs[key] = SECTIONS[key](**_coerce(SECTIONS[key], value or {}))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"section {key!r}: {err}") from None
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def loads_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        _check_keys(yaml.compose(text), source)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{source}: {err}") from None
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return loads_config(path.read_text(), str(path))


def dumps_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(config))
