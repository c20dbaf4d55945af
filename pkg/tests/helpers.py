"""Shared builders, the finite-difference gradient oracle and the acceptance log."""

import warnings

import numpy as np
import torch

from talking_latents.data import make_synthetic_dataset
from talking_latents.latent_space import fit_pca
from talking_latents.models import build_extractor, build_toy_pair
from talking_latents.training import Stage1Trainer


def tiny_setup(cfg, n_speakers=4, clips=1, frames=12, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = make_synthetic_dataset(cfg, n_speakers, clips, frames, seed=seed)
    gen, enc = build_toy_pair(cfg)
    ext = build_extractor(cfg)
    basis = fit_pca(np.concatenate([c.latents for c in ds.clips]), k=cfg.latent.k or 4)
    return ds, basis, gen, enc, ext


def tiny_trainer(cfg, stage_cfg=None, **kw):
    ds, basis, gen, enc, ext = tiny_setup(cfg, **kw)
    return Stage1Trainer(cfg, basis, gen, enc, ext, ds.clips, stage_cfg=stage_cfg)


def fd_check(loss_fn, params, eps=1e-6):
    """Worst relative error ``|g - fd| / |fd|`` over parameter tensors.

    ``loss_fn`` returns a scalar tensor; autograd gradients are compared with
    central differences for every entry of every tensor in ``params``.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            grad = p.grad.detach().clone()
            fd = torch.zeros_like(p)
            for idx in np.ndindex(*p.shape):
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss_fn().item()
                p[idx] = orig - eps
                down = loss_fn().item()
                p[idx] = orig
                fd[idx] = (up - down) / (2 * eps)
            denom = fd.norm().item()
            err = (grad - fd).norm().item()
            worst = max(worst, err / denom if denom > 0 else err)
    return worst


# (criterion number, passed, one-line detail), filled by the acceptance tests
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, passed, line))
    return line
