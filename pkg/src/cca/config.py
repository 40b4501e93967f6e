"""Run configuration: encoder architecture and training hyperparameters."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from typing import Any

EMBED_TYPES = ("type1", "type2", "mask-baseline", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    num_conditions: int = 4
    embed_type: str = "type2"
    out_dim: int | None = None
    precision: int = 64

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2 (one self-attention layer before the CCA layer)")
        if self.num_conditions < 1:
            raise ConfigError("num_conditions must be >= 1")
        if self.embed_type not in EMBED_TYPES:
            raise ConfigError(f"embed_type must be one of {EMBED_TYPES}, got {self.embed_type!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def embedding_dim(self) -> int:
        return self.out_dim or self.dim

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == 64 else np.float32


TINY = EncoderConfig(image_size=8, patch_size=4, dim=8, heads=2, depth=2, ffn_hidden=16, num_conditions=2)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    triplets_per_epoch: int | None = None
    val_triplets: int = 2000
    seed: int = 0
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def from_dict(cls, raw: dict[str, Any]):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def load_json(path) -> dict[str, Any]:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
