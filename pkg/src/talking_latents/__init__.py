"""Audio-driven talking-head generation by moving inverted latent codes along a
low-dimensional PCA subspace, with optional per-subject generator tuning."""

from .config import Config, load_config, save_config
from .errors import (
    AlignmentError,
    ConfigError,
    DataError,
    DimensionError,
    FingerprintError,
    NumericalError,
    RankError,
    TalkingLatentsError,
)
from .latent_space import PcaBasis, compose, fit_pca, lift, project
from .pipeline import Pipeline, VideoClip

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "Config",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FingerprintError",
    "NumericalError",
    "PcaBasis",
    "Pipeline",
    "RankError",
    "TalkingLatentsError",
    "VideoClip",
    "compose",
    "fit_pca",
    "lift",
    "load_config",
    "project",
    "save_config",
]
