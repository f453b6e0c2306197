"""Run configuration: nested dataclasses, YAML files, dotted-path overrides.

Every training/eval stage receives a full ``RunConfig``; each stage writes the
resolved config back into its run directory so results are reproducible from
the artifact alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


@dataclass
class DataConfig:
    sample_rate: int = 16000
    clip_seconds: float = 1.04
    image_size: int = 64
    grid: int = 4                # patch grid is grid x grid, P = grid**2
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    min_extent: int = 1
    max_extent: int = 3
    n_train: int = 512
    n_test: int = 64

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_pixels(self) -> int:
        return self.image_size // self.grid

    @property
    def clip_samples(self) -> int:
        return round(self.clip_seconds * self.sample_rate)


@dataclass
class MelConfig:
    n_fft: int = 512             # 512-point DFT
    win_length: int = 512
    hop_length: int = 160        # 10 ms at 16 kHz
    n_mels: int = 64
    eps_floor: float = 1e-5
    griffin_lim_iters: int = 64


@dataclass
class VaeConfig:
    latent_channels: int = 8
    base_channels: int = 32
    downsample: int = 4          # per-axis compression factor (two stride-2 stages)
    beta_kl: float = 1e-2
    epochs: int = 60
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class EncoderConfig:
    embed_dim: int = 64          # shared text/patch embedding width
    d_k: int = 64
    d_v: int = 64
    cond_dim: int = 128          # fused-condition width (grounding MLP output)
    mlp_hidden: int = 128
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class DiffusionConfig:
    n_steps: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    ddim_steps: int = 200
    guidance: float = 2.0
    drop_prob: float = 0.10
    base_width: int = 64
    # AdamW constants as published; batch size reduced for desk hardware
    # (the reference setup uses 64).
    batch_size: int = 16
    lr: float = 1e-4
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 1e-3
    train_steps: int = 6000
    # ablation switches
    attention_variant: str = "dot_product_single"   # | dot_product_multihead | additive
    n_heads: int = 4
    use_positional_encoding: bool = True
    freeze_denoiser: bool = False
    train_condition: str = "attention"              # | mask  (mask-training ablation)


@dataclass
class MatcherConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    mel_stride: int = 4          # mel frames per matcher token
    mlp_layers: int = 3
    label_smoothing: float = 0.1
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    threshold: float = 0.6


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if dataclasses.is_dataclass(f.type) or f.name in _SECTIONS:
                section = getattr(cfg, f.name)
                for k, v in value.items():
                    if not hasattr(section, k):
                        raise KeyError(f"unknown config key {f.name}.{k}")
                    setattr(section, k, _coerce(type(getattr(section, k)), v))
            else:
                setattr(cfg, f.name, _coerce(type(getattr(cfg, f.name)), value))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(raw)

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings in place and return self."""
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override must look like section.key=value, got {item!r}")
            dotted, value = item.split("=", 1)
            parts = dotted.split(".")
            target: Any = self
            for p in parts[:-1]:
                if not hasattr(target, p):
                    raise KeyError(f"unknown config path {dotted!r}")
                target = getattr(target, p)
            key = parts[-1]
            if not hasattr(target, key):
                raise KeyError(f"unknown config path {dotted!r}")
            current = getattr(target, key)
            setattr(target, key, _coerce(type(current), yaml.safe_load(value)))
        return self


_SECTIONS = {"data", "mel", "vae", "encoder", "diffusion", "matcher"}


def _coerce(typ: type, value: Any) -> Any:
    if typ is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if typ in (int, float, str):
        return typ(value)
    return value
