"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone import check_widths
from .discriminator import BankConfig
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data/toy"
    train_split: str = "train"
    eval_split: str = "train"
    authentic_split: str = "authentic"
    coverage: float = 0.1
    authentic_coverage: Optional[float] = None


@dataclass
class BackboneConfig:
    name: str = "toy"
    widths: tuple = (32, 64, 128, 256)
    norm: str = "group"

    def __post_init__(self):
        self.widths = check_widths(self.widths)
        if self.name != "toy":
            raise ConfigError(f"unknown backbone {self.name!r}; only 'toy' ships with the package")


@dataclass
class ModulationConfig:
    epsilon: float = 1e-6
    reduction: int = 8
    alpha_init: float = 1.0
    beta_init: float = 1.0
    gamma_init: float = 0.0


@dataclass
class FusionConfig:
    enhance: str = "attention"
    diff: str = "post_residual"


@dataclass
class TrainConfig:
    image_size: int = 512
    batch_size: int = 32
    lr_init: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    epochs: int = 70
    weight_decay: float = 1e-2
    checkpoint_every: int = 10
    deterministic: bool = False

    def __post_init__(self):
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _build(cls, values, path: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}.{name}" if path else name)
        elif hint is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "")


def to_dict(cfg) -> dict:
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    return clean(dataclasses.asdict(cfg))


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        values = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    return from_dict(values)


def dump(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def reference(cfg=None) -> str:
    """Markdown table of every config key with its default value."""
    rows = ["| key | default |", "|---|---|"]

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value):
                walk(value, key + ".")
            else:
                shown = list(value) if isinstance(value, tuple) else value
                rows.append(f"| `{key}` | `{json.dumps(shown)}` |")

    walk(cfg or RunConfig(), "")
    return "\n".join(rows) + "\n"


def toy_config(root: str = "data/toy", out_dir: str = "runs/toy", epochs: int = 60) -> RunConfig:
    """Desk-scale settings: 128 px, batch 4, constant learning rate."""
    return RunConfig(
        out_dir=out_dir,
        data=DataConfig(root=root),
        train=TrainConfig(image_size=128, batch_size=4, lr_init=1e-3, lr_decay_every=10_000,
                          epochs=epochs, checkpoint_every=50),
    )

