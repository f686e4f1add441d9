"""Strict YAML configuration tree for the whole engine.

Each section is one of the module dataclasses, so the defaults live next to
the code that uses them. Loading rejects unknown keys at every depth and
the single global ``seed`` is pushed into the sections that need one.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .controllers import Pattern
from .mvae import MvaeConfig
from .observation import CameraSpec
from .rewards import RewardConfig
from .sim import EnvConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    method: str = "tsne"  # "tsne" or "pca"
    k_max: int = 10
    perplexity: float = 30.0

    def __post_init__(self):
        if self.method not in ("tsne", "pca"):
            raise ValueError(f"unknown reduction method {self.method!r}")


@dataclass(frozen=True)
class ReferenceConfig:
    pattern: str = "ClockwiseCircle"
    steps: int = 2000
    stride: int = 10  # clip stride for the archive
    random_steps: int = 500  # random-policy footage mixed into MVAE training
    mvae_stride: int = 20  # stride when sampling clips for MVAE training

    def __post_init__(self):
        Pattern.parse(self.pattern)
        if self.steps < 10 or self.stride < 1 or self.mvae_stride < 1 or self.random_steps < 0:
            raise ValueError("reference steps must cover one clip and strides must be positive")


@dataclass(frozen=True)
class MetricsConfig:
    eval_ticks: int = 500
    eval_seed_offset: int = 1000
    js_smoothing: float = 1.0
    embedding_method: str = "pca"


@dataclass(frozen=True)
class EngineConfig:
    seed: int = 0
    sim: EnvConfig = field(default_factory=EnvConfig)
    camera: CameraSpec = field(default_factory=CameraSpec)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    mvae: MvaeConfig = field(default_factory=MvaeConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


SEEDED_SECTIONS = ("mvae", "train")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(hint, value, path: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(hint, value, path)
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def parse_config(text: str) -> EngineConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if isinstance(data, dict):
        for name in SEEDED_SECTIONS:
            if isinstance(data.get(name), dict) and "seed" in data[name]:
                raise ConfigError(f"{name}.seed: set the top-level seed instead")
    cfg = _build(EngineConfig, data, "")
    return with_seed(cfg, cfg.seed)


def with_seed(cfg: EngineConfig, seed: int) -> EngineConfig:
    return dataclasses.replace(cfg, seed=seed, mvae=dataclasses.replace(cfg.mvae, seed=seed),
                               train=dataclasses.replace(cfg.train, seed=seed))


def load_config(path) -> tuple[EngineConfig, str]:
    """Parsed config plus the exact file text (echoed into artifacts)."""
    with open(path) as fh:
        text = fh.read()
    return parse_config(text), text


def to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def dump_config(cfg: EngineConfig) -> str:
    """YAML text that parses back to ``cfg`` (section seeds folded into the global one)."""
    data = to_dict(cfg)
    for name in SEEDED_SECTIONS:
        data[name].pop("seed")
    return yaml.safe_dump(data, sort_keys=False)
