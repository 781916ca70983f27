"""Run configuration: nested dataclasses loaded from INI-style files.

Sections map onto dotted key prefixes, so ``[loss.weights]`` with
``photo = 1.0`` sets ``loss.weights.photo``. Values are parsed as Python
literals when possible and kept as strings otherwise.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class EncoderConfig:
    channels: int = 128
    blocks: int = 4
    heads: int = 4


@dataclass
class SemanticConfig:
    backend: str = "handcrafted"
    channels: int = 64
    bins: int = 4
    position_weight: float = 0.25
    seed: int = 0


@dataclass
class SegmenterConfig:
    backend: str = "color"
    max_regions: int = 16
    levels: int = 4


@dataclass
class MatchingConfig:
    candidate_fraction: float = 0.01
    tie_break: str = "row-major"


@dataclass
class VisibilityConfig:
    top_k: int = 3
    fallback: str = "full-image"
    enabled: bool = True


@dataclass
class LossWeights:
    photo: float = 1.0
    feat: float = 1.0
    dist: float = 1.0


@dataclass
class LossConfig:
    charbonnier_eps: float = 1e-3
    charbonnier_alpha: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    smoothness_ablation: bool = False
    distance_pairs: str = "same_region"


@dataclass
class DataConfig:
    kind: str = "videos"  # or "synthetic"
    root: str = ""
    crop_size: int = 256
    resize_short_side: int = 288
    interval_min: float = 1.0
    interval_max: float = 3.0
    shared_crop: bool = False
    synthetic_pairs: int = 200
    synthetic_max_shift: int = 24


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 500
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    determinism: str = "strict"
    out_dir: str = "runs/default"


@dataclass
class EvalConfig:
    short_side: int = 256
    exclude_occluded: bool = False
    action_threshold: float = 3.0


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self):
        positive = {
            "train.steps": self.train.steps,
            "train.batch_size": self.train.batch_size,
            "train.lr": self.train.lr,
            "train.checkpoint_every": self.train.checkpoint_every,
            "visibility.top_k": self.visibility.top_k,
            "data.crop_size": self.data.crop_size,
            "loss.charbonnier_eps": self.loss.charbonnier_eps,
            "encoder.channels": self.encoder.channels,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{key} must be positive, got {value}")
        if not 0 < self.matching.candidate_fraction <= 1:
            raise ConfigError("matching.candidate_fraction must lie in (0, 1]")
        if self.data.crop_size % 8:
            raise ConfigError("data.crop_size must be divisible by 8")
        if self.train.warmup_steps < 0 or self.train.weight_decay < 0:
            raise ConfigError("train.warmup_steps and train.weight_decay must be non-negative")
        if self.loss.distance_pairs not in ("same_region", "any_region"):
            raise ConfigError("loss.distance_pairs must be same_region or any_region")
        return self


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        return raw.strip()


def set_key(cfg: Config, dotted: str, value) -> None:
    """Assign ``value`` to a dotted key, checking the key exists and coercing the type."""
    *path, leaf = dotted.split(".")
    node = cfg
    for part in path:
        if not dataclasses.is_dataclass(node) or not hasattr(node, part):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = getattr(node, part)
    if not dataclasses.is_dataclass(node) or not hasattr(node, leaf):
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(node, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{dotted!r} is a section, not a value")
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
        elif isinstance(current, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, str):
            value = str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{dotted}: cannot use {value!r} where a {type(current).__name__} is expected")
    setattr(node, leaf, value)


def from_dict(data: dict) -> Config:
    cfg = Config()

    def walk(prefix, obj):
        for key, value in obj.items():
            dotted = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                walk(dotted, value)
            else:
                set_key(cfg, dotted, value)

    walk("", data)
    return cfg.validate()


def read_overrides(path) -> dict:
    """Flat ``{dotted.key: value}`` mapping from an INI config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {
        f"{section}.{key}": _parse_value(raw)
        for section in parser.sections()
        for key, raw in parser.items(section)
    }


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    for dotted, value in overrides.items():
        set_key(cfg, dotted, value)
    return cfg.validate()


def load_config(path=None, overrides=None, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    if path is not None:
        apply_overrides(cfg, read_overrides(path))
    return apply_overrides(cfg, overrides or {})


def dump_config(cfg: Config, path) -> None:
    """Write ``cfg`` in the same INI dialect that :func:`load_config` reads."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def walk(prefix, obj):
        scalars = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(f"{prefix}.{f.name}", value)
            else:
                scalars[f.name] = repr(value)
        if scalars:
            parser[prefix] = scalars

    for f in dataclasses.fields(cfg):
        walk(f.name, getattr(cfg, f.name))
    with open(path, "w") as fh:
        parser.write(fh)
