"""Run configuration: training hyper-parameters, model sizes and paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from refseg.lora import TEXT_DEPTHS, TrainabilityPolicy

CONFIG_VERSION = 1
CONDITIONING = ("text", "constant")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    warmup_steps: int | None = None
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0
    # adapters and trainability
    lora_rank: int = 16
    clip_lora_rank: int = 16
    text_lora_depth: str = "full"
    image_lora: bool = True
    highres_lora: bool = True
    decoder_trainable: bool = True
    # prompter
    downsample: int = 4
    dense_prompt: bool = True
    text_conditioning: str = "text"
    # model sizes
    d1: int = 64
    d2: int = 64
    text_layers: int = 2
    image_layers: int = 2
    highres_layers: int = 2
    heads: int = 4
    max_len: int = 16
    size_low: int = 384
    size_high: int = 1024
    patch_low: int = 16
    patch_high: int = 16
    num_masks: int = 3
    decoder_depth: int = 2

    def __post_init__(self):
        self.validate()

    @property
    def grid_low(self) -> tuple[int, int]:
        g = self.size_low // self.patch_low
        return g, g

    @property
    def grid_high(self) -> tuple[int, int]:
        g = self.size_high // self.patch_high
        return g, g

    @property
    def num_prompts(self) -> int:
        return (self.grid_low[0] // self.downsample) ** 2

    def policy(self) -> TrainabilityPolicy:
        return TrainabilityPolicy(
            text_lora_depth=self.text_lora_depth,
            image_lora=self.image_lora,
            highres_lora=self.highres_lora,
            decoder_trainable=self.decoder_trainable,
            clip_rank=self.clip_lora_rank,
            highres_rank=self.lora_rank,
        )

    def validate(self) -> None:
        positive = (
            "lr", "epochs", "batch_size", "lora_rank", "clip_lora_rank", "downsample",
            "d1", "d2", "text_layers", "image_layers", "highres_layers", "heads",
            "max_len", "size_low", "size_high", "patch_low", "patch_high", "num_masks",
            "decoder_depth",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.text_lora_depth not in TEXT_DEPTHS:
            raise ConfigError(f"text_lora_depth must be one of {TEXT_DEPTHS}")
        if self.text_conditioning not in CONDITIONING:
            raise ConfigError(f"text_conditioning must be one of {CONDITIONING}")
        s = self.downsample
        if s < 2 or s & (s - 1):
            raise ConfigError(f"downsample must be a power of two >= 2, got {s}")
        if self.size_low >= self.size_high:
            raise ConfigError(
                f"size_low ({self.size_low}) must be smaller than size_high ({self.size_high})"
            )
        if self.size_low % self.patch_low:
            raise ConfigError(f"size_low {self.size_low} not divisible by patch_low {self.patch_low}")
        if self.size_high % self.patch_high:
            raise ConfigError(f"size_high {self.size_high} not divisible by patch_high {self.patch_high}")
        if self.grid_low[0] % s:
            raise ConfigError(f"low-res grid {self.grid_low[0]} not divisible by downsample {s}")
        if self.d1 % self.heads or self.d2 % self.heads:
            raise ConfigError("d1 and d2 must be divisible by heads")
        if self.d2 % 8:
            raise ConfigError("d2 must be divisible by 8")
        if self.clip_lora_rank >= self.d1:
            raise ConfigError(f"clip_lora_rank {self.clip_lora_rank} must be below d1 ({self.d1})")
        if self.lora_rank >= self.d2:
            raise ConfigError(f"lora_rank {self.lora_rank} must be below d2 ({self.d2})")

    def warmup_for(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return min(self.warmup_steps, max(total_steps - 1, 0))
        return min(int(round(self.warmup_fraction * total_steps)), max(total_steps - 1, 0))


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    manifest: str | None = None
    out_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return {"version": CONFIG_VERSION, "manifest": self.manifest, "out_dir": self.out_dir, **asdict(self.train)}

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        top = {k: overrides.pop(k) for k in ("manifest", "out_dir") if overrides.get(k) is not None}
        train = {k: v for k, v in overrides.items() if v is not None}
        try:
            new_train = replace(self.train, **train)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return replace(self, train=new_train, **top)


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def parse_config(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    """Validate a raw config mapping; unknown keys and wrong versions are rejected."""
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}; expected {CONFIG_VERSION}")
    manifest = data.pop("manifest", None)
    out_dir = data.pop("out_dir", "runs/default")
    unknown = sorted(set(data) - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if base_dir is not None:
        if manifest is not None:
            manifest = str((base_dir / manifest).resolve()) if not Path(manifest).is_absolute() else manifest
        if not Path(out_dir).is_absolute():
            out_dir = str((base_dir / out_dir).resolve())
    try:
        train = TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train=train, manifest=manifest, out_dir=out_dir)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_config(data, base_dir=path.parent)
