"""The four networks: audio encoder, latent decoder, generator and image encoder.

Frames are ``(..., H, W, 3)`` tensors with values in ``[-1, 1]``. Everything is
float64: the networks are small, and double precision keeps finite-difference
gradient checks and the toy inversion round trip tight.
"""

from __future__ import annotations

import hashlib
import math
import warnings

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import Config, ModelConfig
from .errors import ConfigError, DimensionError

DTYPE = torch.float64


class AudioEncoder(nn.Module):
    """Per-segment conv stack followed by a unidirectional multi-layer LSTM.

    The LSTM is unrolled by hand, one time step at a time, so that feeding a
    whole sequence and feeding it frame by frame with carried state run the
    exact same arithmetic.
    """

    def __init__(self, segment_shape=(12, 28), conv_channels=(32, 64, 128), embed_dim=256, lstm_layers=3):
        super().__init__()
        self.segment_shape = tuple(segment_shape)
        self.embed_dim = embed_dim
        layers = []
        in_ch = 1
        h, w = self.segment_shape
        for ch in conv_channels:
            layers += [nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.conv = nn.Sequential(*layers)
        self.feature_dim = in_ch * h * w
        self.lstm = nn.ModuleList(
            nn.LSTMCell(self.feature_dim if i == 0 else embed_dim, embed_dim) for i in range(lstm_layers)
        )
        # per-row input standardisation, fitted on training segments
        self.register_buffer("input_mean", torch.zeros(self.segment_shape[0], 1))
        self.register_buffer("input_scale", torch.ones(self.segment_shape[0], 1))

    def fit_input_normalization(self, segments: torch.Tensor) -> None:
        """Set the input mean/scale from a stack of ``(..., rows, cols)`` training segments."""
        flat = segments.reshape(-1, *self.segment_shape).transpose(0, 1).reshape(self.segment_shape[0], -1)
        flat = flat.to(torch.float64)
        with torch.no_grad():
            self.input_mean.copy_(flat.mean(dim=1, keepdim=True))
            self.input_scale.copy_(1.0 / flat.std(dim=1, keepdim=True).clamp_min(1e-6))

    def features(self, segments: torch.Tensor) -> torch.Tensor:
        """``(..., rows, cols)`` segments to ``(..., feature_dim)`` conv features."""
        if tuple(segments.shape[-2:]) != self.segment_shape:
            raise DimensionError(f"segment shape {tuple(segments.shape[-2:])} != {self.segment_shape}")
        lead = segments.shape[:-2]
        x = ((segments - self.input_mean) * self.input_scale).reshape(-1, 1, *self.segment_shape)
        return self.conv(x).reshape(*lead, self.feature_dim)

    def initial_state(self, batch: int):
        zeros = torch.zeros(batch, self.embed_dim, dtype=self.lstm[0].weight_ih.dtype)
        return [(zeros, zeros) for _ in self.lstm]

    def step(self, feature: torch.Tensor, state):
        """Advance one time step. ``feature`` is ``(B, feature_dim)``."""
        x = feature
        new_state = []
        for cell, (h, c) in zip(self.lstm, state):
            h, c = cell(x, (h, c))
            new_state.append((h, c))
            x = h
        return x, new_state

    def forward(self, segments: torch.Tensor, state=None):
        """``(B, T, rows, cols)`` to embeddings ``(B, T, embed_dim)`` and final state."""
        if segments.dim() != 4:
            raise DimensionError("expected segments of shape (B, T, rows, cols)")
        batch, steps = segments.shape[:2]
        feats = self.features(segments)
        if state is None:
            state = self.initial_state(batch)
        outputs = []
        for t in range(steps):
            e, state = self.step(feats[:, t], state)
            outputs.append(e)
        if not outputs:
            return feats.new_zeros(batch, 0, self.embed_dim), state
        return torch.stack(outputs, dim=1), state


class LatentDecoder(nn.Module):
    """MLP from ``concat(h_I, e_t)`` to subspace coordinates ``h_t``."""

    def __init__(self, k: int, embed_dim: int, width: int = 512, n_hidden: int = 3, slope: float = 0.2):
        super().__init__()
        self.k = k
        self.embed_dim = embed_dim
        dims = [k + embed_dim] + [width] * n_hidden
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(slope)]
        self.hidden = nn.Sequential(*layers)
        self.embed_norm = nn.LayerNorm(embed_dim)
        self.out = nn.Linear(dims[-1], k)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        # h_I is divided by the per-component std of the basis before entering the MLP
        self.register_buffer("identity_scale", torch.ones(k))

    def set_identity_scale(self, eigenvalues) -> None:
        eig = torch.tensor(np.array(eigenvalues), dtype=self.identity_scale.dtype)
        with torch.no_grad():
            self.identity_scale.copy_(1.0 / torch.sqrt(eig.clamp_min(1e-12)))

    def forward(self, h_identity: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if h_identity.shape[-1] != self.k or embedding.shape[-1] != self.embed_dim:
            raise DimensionError(
                f"decoder expects k={self.k} and d_e={self.embed_dim}, "
                f"got {h_identity.shape[-1]} and {embedding.shape[-1]}"
            )
        h_identity = h_identity * self.identity_scale
        if h_identity.dim() < embedding.dim():
            h_identity = h_identity.unsqueeze(-2).expand(*embedding.shape[:-1], self.k)
        return self.out(self.hidden(torch.cat([h_identity, self.embed_norm(embedding)], dim=-1)))


class Generator(nn.Module):
    """Synthesis interface: latent ``(..., L, C)`` to frame ``(..., H, W, 3)``."""

    latent_shape: tuple[int, int]
    image_shape: tuple[int, int, int]

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        return self(w)


class ImageEncoder(nn.Module):
    """Inversion interface: frame ``(..., H, W, 3)`` to latent ``(..., L, C)``."""

    latent_shape: tuple[int, int]
    image_shape: tuple[int, int, int]

    def invert(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)


class ToyGenerator(Generator):
    """``tanh(A flatten(w) + b)`` with ``A`` having orthogonal columns scaled by ``scale``."""

    def __init__(self, latent_shape=(4, 32), image_shape=(32, 32, 3), seed: int = 0, scale: float = 0.5):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)
        d = math.prod(self.latent_shape)
        p = math.prod(self.image_shape)
        if d > p:
            raise DimensionError(f"latent dimension {d} exceeds pixel count {p}; A cannot be full column rank")
        gen = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(p, d, generator=gen, dtype=DTYPE))
        self.A = nn.Parameter(q * scale * math.sqrt(p / d))
        self.b = nn.Parameter(0.1 * torch.randn(p, generator=gen, dtype=DTYPE))

    def preactivation(self, w: torch.Tensor) -> torch.Tensor:
        if tuple(w.shape[-2:]) != self.latent_shape:
            raise DimensionError(f"latent shape {tuple(w.shape[-2:])} != {self.latent_shape}")
        flat = w.reshape(*w.shape[:-2], -1)
        return flat @ self.A.T + self.b

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        pre = self.preactivation(w)
        return torch.tanh(pre).reshape(*pre.shape[:-1], *self.image_shape)


class ToyEncoder(ImageEncoder):
    """Exact left inverse of a :class:`ToyGenerator`: ``pinv(A) (atanh(x) - b)``.

    Holds a frozen copy of the generator's weights taken at construction, so
    later tuning of the generator does not change the encoder.
    """

    clamp = 1.0 - 1e-6

    def __init__(self, generator: ToyGenerator):
        super().__init__()
        self.latent_shape = generator.latent_shape
        self.image_shape = generator.image_shape
        with torch.no_grad():
            self.register_buffer("pinv", torch.linalg.pinv(generator.A.detach().clone()))
            self.register_buffer("b", generator.b.detach().clone())
        self.clamped_pixels = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.image_shape:
            raise DimensionError(f"image shape {tuple(x.shape[-3:])} != {self.image_shape}")
        flat = x.reshape(*x.shape[:-3], -1)
        outside = int((flat.abs() > self.clamp).sum())
        if outside:
            self.clamped_pixels += outside
            warnings.warn(f"{outside} pixels at or beyond +-1 clamped before atanh", RuntimeWarning, stacklevel=2)
        flat = flat.clamp(-self.clamp, self.clamp)
        latent = (torch.atanh(flat) - self.b) @ self.pinv.T
        return latent.reshape(*latent.shape[:-1], *self.latent_shape)


class PerceptualExtractor(nn.Module):
    """Fixed random-weight conv pyramid standing in for VGG features.

    Each level halves the resolution. Features from every level are flattened,
    scaled by ``1/sqrt(size)`` so levels weigh equally, and concatenated.
    """

    def __init__(self, channels=(8, 16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList()
        in_ch = 3
        for ch in channels:
            conv = nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1).to(DTYPE)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=DTYPE) * math.sqrt(2.0 / (in_ch * 9)))
                conv.bias.zero_()
            self.layers.append(conv)
            in_ch = ch
        self.requires_grad_(False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, 3)`` frames to ``(..., n_features)`` stacked features."""
        lead = frames.shape[:-3]
        x = frames.reshape(-1, *frames.shape[-3:]).permute(0, 3, 1, 2)
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x.flatten(1) / math.sqrt(x[0].numel()))
        return torch.cat(feats, dim=1).reshape(*lead, -1)


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """L2 distance between stacked extractor features, one value per frame."""
    if x.shape != y.shape:
        raise DimensionError(f"frame shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    diff = extractor(x) - extractor(y)
    return safe_norm(diff)


def safe_norm(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero (sub)gradient at the origin."""
    sq = (diff * diff).sum(dim=-1)
    zero = sq == 0
    safe = torch.where(zero, torch.ones_like(sq), sq)
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(safe))


def build_toy_pair(cfg: Config) -> tuple[ToyGenerator, ToyEncoder]:
    gen = ToyGenerator(cfg.latent.shape, cfg.image.shape, seed=cfg.model.seed, scale=cfg.model.generator_scale)
    gen.requires_grad_(False)
    enc = ToyEncoder(gen)
    enc.requires_grad_(False)
    return gen, enc


def build_extractor(cfg: Config) -> PerceptualExtractor:
    return PerceptualExtractor(cfg.model.extractor_channels, seed=cfg.model.seed + 1)


def network_dtype(cfg: Config) -> torch.dtype:
    try:
        return {"float32": torch.float32, "float64": torch.float64}[cfg.model.network_dtype]
    except KeyError:
        raise ConfigError(f"model.network_dtype must be float32 or float64, got {cfg.model.network_dtype!r}") from None


def build_stage1_models(cfg: Config, k: int, seed: int) -> tuple[AudioEncoder, LatentDecoder]:
    dtype = network_dtype(cfg)
    torch.manual_seed(seed)
    m: ModelConfig = cfg.model
    audio_encoder = AudioEncoder(cfg.audio.segment_shape, m.conv_channels, m.embed_dim, m.lstm_layers).to(dtype)
    decoder = LatentDecoder(k, m.embed_dim, m.decoder_width, m.decoder_layers, m.leaky_slope).to(dtype)
    return audio_encoder, decoder


def count_parameters(*modules: nn.Module, trainable_only: bool = True) -> int:
    total = 0
    for module in modules:
        for p in module.parameters():
            if p.requires_grad or not trainable_only:
                total += p.numel()
    return total


def parameter_hash(*modules: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    digest = hashlib.sha256()
    for i, module in enumerate(modules):
        for name, tensor in sorted(module.state_dict().items()):
            digest.update(f"{i}.{name}".encode())
            digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
