"""Adapters for externally trained generators and image encoders.

A pre-trained style-based generator and its inversion encoder can be exported
to TorchScript and wrapped here. Such networks usually work on ``(N, 3, H, W)``
tensors in ``[-1, 1]``; the wrappers convert to and from the channel-last
layout used everywhere else in this package.
"""

from __future__ import annotations

import copy
import io
from pathlib import Path

import torch

from .errors import DataError, DimensionError
from .models import DTYPE, Generator, ImageEncoder


def _load_script(path: str | Path) -> torch.jit.ScriptModule:
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except (RuntimeError, ValueError, OSError) as exc:
        raise DataError(f"cannot load TorchScript module {path}: {exc}") from exc
    module.eval()
    return module


class _ScriptedModule:
    """Copy and freeze support for wrapped TorchScript modules, which do not
    implement ``requires_grad_`` and lose leaf parameters under ``deepcopy``."""

    net: torch.nn.Module

    def requires_grad_(self, requires_grad: bool = True):
        for p in self.parameters():
            p.requires_grad_(requires_grad)
        return self

    def __deepcopy__(self, memo):
        if not isinstance(self.net, torch.jit.ScriptModule):
            net = copy.deepcopy(self.net, memo)
        else:
            buf = io.BytesIO()
            torch.jit.save(self.net, buf)
            buf.seek(0)
            net = torch.jit.load(buf, map_location="cpu")
        return type(self)(net, self.latent_shape, self.image_shape)


class ScriptedGenerator(_ScriptedModule, Generator):
    """Wraps a scripted ``w (N, L, C) -> image (N, 3, H, W)`` synthesis network.

    Parameters of the wrapped module stay trainable through ``parameters()`` so
    that stage-two tuning works unchanged.
    """

    def __init__(self, module: torch.nn.Module, latent_shape, image_shape):
        super().__init__()
        self.net = module
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)

    @classmethod
    def load(cls, path, latent_shape, image_shape) -> "ScriptedGenerator":
        return cls(_load_script(path), latent_shape, image_shape)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        if tuple(w.shape[-2:]) != self.latent_shape:
            raise DimensionError(f"latent shape {tuple(w.shape[-2:])} != {self.latent_shape}")
        lead = w.shape[:-2]
        dtype = next(self.net.parameters()).dtype
        out = self.net(w.reshape(-1, *self.latent_shape).to(dtype))
        return out.permute(0, 2, 3, 1).reshape(*lead, *self.image_shape).to(DTYPE)


class ScriptedEncoder(_ScriptedModule, ImageEncoder):
    """Wraps a scripted ``image (N, 3, H, W) -> w (N, L, C)`` inversion network."""

    def __init__(self, module: torch.nn.Module, latent_shape, image_shape):
        super().__init__()
        self.net = module
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)

    @classmethod
    def load(cls, path, latent_shape, image_shape) -> "ScriptedEncoder":
        return cls(_load_script(path), latent_shape, image_shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.image_shape:
            raise DimensionError(f"image shape {tuple(x.shape[-3:])} != {self.image_shape}")
        lead = x.shape[:-3]
        dtype = next(self.net.parameters()).dtype
        out = self.net(x.reshape(-1, *self.image_shape).permute(0, 3, 1, 2).to(dtype))
        return out.reshape(*lead, *self.latent_shape).to(DTYPE)
