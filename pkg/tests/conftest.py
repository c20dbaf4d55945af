import warnings

import numpy as np
import pytest
import torch

from talking_latents.config import Config
from talking_latents.data import make_synthetic_dataset

torch.set_num_threads(1)


def tiny_config() -> Config:
    """L=2, C=8, d_e=8 networks in float64 over 16x16 frames."""
    cfg = Config()
    cfg.latent.n_layers = 2
    cfg.latent.n_channels = 8
    cfg.image.height = cfg.image.width = 16
    cfg.model.conv_channels = (2, 3, 4)
    cfg.model.embed_dim = 8
    cfg.model.decoder_width = 8
    cfg.model.extractor_channels = (3, 4, 4, 4)
    cfg.model.network_dtype = "float64"
    cfg.stage1.seq_len = 3
    cfg.stage1.batch_size = 2
    return cfg


@pytest.fixture
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Three speakers with two 30-frame clips each, default latent/image sizes."""
    cfg = Config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = make_synthetic_dataset(cfg, n_speakers=3, clips_per_speaker=2, frames_per_clip=30, seed=7)
    return cfg, ds


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
