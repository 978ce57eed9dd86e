"""Run configuration: nested YAML blocks mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .decoder import DecoderConfig
from .errors import ConfigError

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class DatasetConfig:
    root: str | None = None
    palette: str | None = None
    train_fraction: float = 0.9


@dataclass
class AugmentBlock:
    a: float = 1.0
    b: float = 1.0
    total_target: int = 23000
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    brightness: float = 20.0
    contrast: float = 0.2


@dataclass
class PretrainConfig:
    image_size: tuple[int, int] = (224, 224)
    mask_ratio: float = 0.4
    codebook_size: int = 64
    codebook_patches: int = 4000
    epochs: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8


@dataclass
class TrainConfig:
    image_size: tuple[int, int] = (2048, 640)
    epochs: int = 60
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 8
    online_flip: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    augment: AugmentBlock = field(default_factory=AugmentBlock)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, need_dataset: bool = False) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 < self.dataset.train_fraction < 1.0:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")
        if not 0.0 < self.pretrain.mask_ratio < 1.0:
            raise ConfigError("pretrain.mask_ratio must lie in (0, 1)")
        if self.augment.a <= 0 or self.augment.b < 1:
            raise ConfigError("augment.a must be > 0 and augment.b >= 1")
        for block in (self.pretrain, self.train):
            if block.epochs < 0 or block.batch_size < 1 or block.lr <= 0:
                raise ConfigError(f"invalid optimisation settings in {type(block).__name__}")
        if self.decoder.num_scales != len(self.backbone.scales):
            raise ConfigError("decoder.num_scales must equal the number of backbone scales")
        if need_dataset:
            if not self.dataset.root or not Path(self.dataset.root).is_dir():
                raise ConfigError(f"dataset.root {self.dataset.root!r} does not exist")
        if self.dataset.palette and not Path(self.dataset.palette).exists():
            raise ConfigError(f"dataset.palette {self.dataset.palette!r} does not exist")
        return self

    def to_dict(self) -> dict[str, Any]:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if isinstance(v, list):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v

        return plain(dataclasses.asdict(self))


_BLOCKS = {
    "dataset": DatasetConfig,
    "backbone": BackboneConfig,
    "decoder": DecoderConfig,
    "augment": AugmentBlock,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
}
_TUPLE_KEYS = {"image_size", "img_size", "scales", "interaction_points"}


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_KEYS and v is not None else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(_BLOCKS) - {"seed", "precision"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    blocks = {name: _build(cls, data.get(name) or {}, name) for name, cls in _BLOCKS.items()}
    cfg = RunConfig(seed=int(data.get("seed", 0)), precision=str(data.get("precision", "float32")), **blocks)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config; ``desk`` or ``paper`` select the bundled presets."""
    if path is None:
        path = "desk"
    if str(path) in ("desk", "paper"):
        path = CONFIG_DIR / f"{path}.yaml"
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = config_from_dict(data)
    base = path.parent
    for attr in ("root", "palette"):
        value = getattr(cfg.dataset, attr)
        if value and not Path(value).is_absolute():
            setattr(cfg.dataset, attr, str((base / value).resolve()))
    return cfg


def desk_config() -> RunConfig:
    return load_config("desk")


def paper_config() -> RunConfig:
    return load_config("paper")
