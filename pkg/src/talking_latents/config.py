"""Structured configuration shared by every subcommand.

One YAML/JSON tree with a section per subsystem. Unknown keys are rejected so a
typo in a config file fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

TOOL_VERSION = "0.1.0"


@dataclass
class LatentConfig:
    n_layers: int = 4  # L
    n_channels: int = 32  # C
    # None picks min(512, n_samples - 1, numerical rank) at fit time.
    k: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_layers, self.n_channels)

    @property
    def dim(self) -> int:
        return self.n_layers * self.n_channels


@dataclass
class ImageConfig:
    height: int = 32
    width: int = 32

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, 3)


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    fps: float = 25.0
    segment_seconds: float = 0.2
    window_samples: int = 400  # 25 ms at 16 kHz
    hop_samples: int = 100
    n_fft: int = 512
    n_mels: int = 26
    n_coeff: int = 12
    n_steps: int = 28
    preemphasis: float = 0.97
    drop_c0: bool = True
    log_floor: float = 1e-10
    # False: rows are 12 coefficients, columns 28 time steps.
    # True: rows are 12 time steps, columns 28 coefficients.
    mfcc_transposed: bool = False

    @property
    def segment_shape(self) -> tuple[int, int]:
        # 12 x 28 either way; only the meaning of the axes changes
        return (self.n_coeff, self.n_steps)

    def effective(self) -> "MfccConfig":
        """Config actually used by the extractor after the transpose switch."""
        if not self.mfcc_transposed:
            return self
        seg = int(round(self.segment_seconds * self.sample_rate))
        hop = (seg - self.window_samples) // (self.n_coeff - 1)
        return dataclasses.replace(
            self,
            n_coeff=self.n_steps,
            n_steps=self.n_coeff,
            n_mels=max(self.n_mels, self.n_steps + 12),
            hop_samples=hop,
        )


@dataclass
class ModelConfig:
    conv_channels: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 256  # LSTM hidden size == audio embedding size
    lstm_layers: int = 3
    decoder_width: int = 512
    decoder_layers: int = 3
    leaky_slope: float = 0.2
    extractor_channels: tuple[int, ...] = (8, 16, 32, 64)
    network_dtype: str = "float32"  # audio encoder + decoder; G, E_I and losses stay float64
    generator_scale: float = 0.5  # per-pixel pre-activation std for unit-variance latents
    seed: int = 0  # seeds the toy generator and the perceptual extractor


@dataclass
class Stage1Config:
    lambda_latent: float = 250.0
    lambda_lpips: float = 1.0
    lr: float = 0.0002
    betas: tuple[float, float] = (0.9, 0.999)
    seq_len: int = 8
    batch_size: int = 32
    max_steps: int = 500
    seed: int = 0
    disable_latent_loss: bool = False
    disable_lpips_loss: bool = False
    squared_l2: bool = False
    log_every: int = 10
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.lambda_latent < 0 or self.lambda_lpips < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.disable_latent_loss and self.disable_lpips_loss:
            raise ConfigError("cannot disable both the latent and the perceptual loss")
        if self.seq_len < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("seq_len and batch_size must be positive, max_steps nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class Stage2Config:
    lr: float = 0.0003
    betas: tuple[float, float] = (0.9, 0.999)
    max_steps: int = 200
    seed: int = 0
    squared_l2: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("stage-two lr must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")


@dataclass
class DataConfig:
    n_speakers: int = 4
    clips_per_speaker: int = 5
    frames_per_clip: int = 50
    n_holdout: int = 10
    seed: int = 0


@dataclass
class MetricsConfig:
    n_mouth_landmarks: int = 20
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0


@dataclass
class Config:
    latent: LatentConfig = field(default_factory=LatentConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    audio: MfccConfig = field(default_factory=MfccConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, tree: dict[str, Any] | None) -> "Config":
        return _build(cls, tree or {}, "")

    def fingerprint(self) -> str:
        """Hash of the sections that fix tensor shapes and frozen networks."""
        tree = self.to_dict()
        arch = {key: tree[key] for key in ("latent", "image", "audio", "model")}
        arch["latent"].pop("k")  # k is checked against the basis directly
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def override(self, dotted: dict[str, Any]) -> "Config":
        tree = self.to_dict()
        for key, value in dotted.items():
            node = tree
            *parents, leaf = key.split(".")
            for part in parents:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return Config.from_dict(tree)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, tree, prefix):
    if not isinstance(tree, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(tree) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys under {prefix or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in tree.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple) and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return Config.from_dict(tree)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
