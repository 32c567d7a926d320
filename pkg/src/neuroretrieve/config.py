"""Run configuration: nested dataclasses, stored on disk as one flat JSON object
with dotted keys (``"encoder.K": 2``, ``"loss.tau": 0.07``)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.07
    strategy: str = "both"
    neg_samples: Any = "all"  # int or "all"
    learn_tau: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PreprocessConfig:
    target_fs: float = 0.0  # 0: keep the recorded rate
    bandpass: bool = False
    low: float = 55.0
    high: float = 95.0
    order: int = 4
    zero_phase: bool = True
    normalize: bool = True


@dataclass
class VisualConfig:
    dim: int = 128
    side: int = 32
    trainable: bool = False
    standardize: bool = True  # z-score frozen features with training-split statistics


@dataclass
class MontageConfig:
    k: int = 8
    positions: str = ""  # coordinate file; empty: <data>/montage.txt or the built-in layout


@dataclass
class PretrainConfig:
    window: int = 128
    horizon: int = 0  # 0: window // 4
    stride: int = 32
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3

    @property
    def effective_horizon(self) -> int:
        return self.horizon or max(1, self.window // 4)


@dataclass
class RunConfig:
    seed: int = 0
    data: str = ""
    manifest: str = ""  # empty: <data>/manifest.jsonl
    embeddings: str = ""  # precomputed visual features; empty: built-in image encoder
    out_dir: str = "runs/default"
    fold: int = 0
    split_seed: int = 0
    batch_size: int = 8
    epochs: int = 50
    joint_dim: int = 64
    open_class: str = ""
    pretrained: str = ""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    visual: VisualConfig = field(default_factory=VisualConfig)
    montage: MontageConfig = field(default_factory=MontageConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data) / "manifest.jsonl"


def flatten(cfg) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": x for k, x in flatten(v).items()})
        else:
            out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _build(cls, values: dict[str, Any], prefix: str = ""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            sub = {k[len(f.name) + 1 :]: v for k, v in values.items() if k.startswith(f.name + ".")}
            kwargs[f.name] = _build(type(default), sub, prefix + f.name + ".")
        elif f.name in values:
            kwargs[f.name] = _coerce(values[f.name], default, prefix + f.name)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        return tuple(value)
    return value


def from_flat(values: dict[str, Any]) -> RunConfig:
    known = set(flatten(RunConfig()))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return _build(RunConfig, values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def run_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Parse a config file (empty or missing path -> all defaults) plus overrides."""
    values: dict[str, Any] = {}
    if path:
        text = Path(path).read_text().strip()
        if text:
            values = json.loads(text)
            if not isinstance(values, dict):
                raise ConfigError("config file must hold one JSON object")
    values.update(overrides or {})
    return from_flat(values)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(flatten(cfg), indent=1, sort_keys=True)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg) + "\n")
