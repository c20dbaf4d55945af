"""Stage one (audio encoder + latent decoder) and stage two (generator tuning).

Stage one minimises ``lambda_latent * L_latent + lambda_lpips * L_lpips`` with
the generator and image encoder frozen. ``L_latent`` sums, over the frames of a
window, the Euclidean norm between target and predicted latent codes;
``L_lpips`` sums perceptual distances between generated frames and
re-synthesised inversions of the targets. Batch losses are averaged over the
windows in the batch.

Stage two tunes only the generator around fixed pivot latents
``w_t = E_I(x_t)`` with ``L_lpips + L_L2``.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import base_meta, check_fingerprint, load_archive, load_state, save_archive, state_arrays
from .config import Config, Stage1Config, Stage2Config
from .data import Clip, clip_segments
from .errors import DataError, DimensionError, NumericalError
from .latent_space import PcaBasis
from .models import (
    DTYPE,
    AudioEncoder,
    Generator,
    ImageEncoder,
    LatentDecoder,
    PerceptualExtractor,
    build_stage1_models,
    parameter_hash,
    safe_norm,
)

log = logging.getLogger(__name__)


def _norms(diff: torch.Tensor, squared: bool) -> torch.Tensor:
    flat = diff.reshape(*diff.shape[: diff.dim() - 2], -1) if diff.dim() >= 2 else diff
    return (flat * flat).sum(-1) if squared else safe_norm(flat)


def latent_loss(targets: torch.Tensor, preds: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """``sum_t ||w_t - w_bar_t||`` over ``(..., T, L, C)`` codes; leading dims kept."""
    targets = torch.as_tensor(targets, dtype=DTYPE)
    preds = torch.as_tensor(preds, dtype=DTYPE)
    if targets.shape != preds.shape:
        raise DimensionError(f"latent sequences differ in shape: {tuple(targets.shape)} vs {tuple(preds.shape)}")
    if targets.dim() < 3 or targets.shape[-3] < 1:
        raise DimensionError("latent sequences must be (..., T, L, C) with T >= 1")
    return _norms(targets - preds, squared).sum(-1)


def lpips_loss(
    generated: torch.Tensor, target_inverted: torch.Tensor, extractor: PerceptualExtractor, squared: bool = False
) -> torch.Tensor:
    """``sum_t ||phi(x_bar_t) - phi(G(E_I(x_t)))||`` over ``(..., T, H, W, 3)`` clips."""
    if generated.shape != target_inverted.shape:
        raise DimensionError(f"clips differ in shape: {tuple(generated.shape)} vs {tuple(target_inverted.shape)}")
    if generated.dim() < 4 or generated.shape[-4] < 1:
        raise DimensionError("clips must be (..., T, H, W, 3) with T >= 1")
    diff = extractor(generated) - extractor(target_inverted)
    per_frame = (diff * diff).sum(-1) if squared else safe_norm(diff)
    return per_frame.sum(-1)


def pixel_loss(frames: torch.Tensor, recon: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """``sum_t ||x_t - x_hat_t||`` over ``(..., T, H, W, 3)`` clips."""
    diff = (frames - recon).reshape(*frames.shape[:-3], -1)
    per_frame = (diff * diff).sum(-1) if squared else safe_norm(diff)
    return per_frame.sum(-1)


# -- stage one ------------------------------------------------------------


@dataclass
class Batch:
    segments: torch.Tensor  # (B, T, rows, cols)
    targets: torch.Tensor  # (B, T, L, C)
    identity: torch.Tensor  # (B, L, C)
    target_frames: torch.Tensor  # (B, T, H, W, 3), G(E_I(x_t))


class TrajectoryModel(nn.Module):
    """Audio encoder + latent decoder bound to a PCA basis."""

    def __init__(self, audio_encoder: AudioEncoder, decoder: LatentDecoder, basis: PcaBasis):
        super().__init__()
        if decoder.k != basis.k:
            raise DimensionError(f"decoder predicts k={decoder.k} coordinates, basis has k={basis.k}")
        self.audio_encoder = audio_encoder
        self.decoder = decoder
        self.latent_shape = basis.latent_shape
        self.register_buffer("components", torch.tensor(np.array(basis.components), dtype=DTYPE))
        self.register_buffer("mean", torch.tensor(np.array(basis.mean), dtype=DTYPE))

    def project(self, w: torch.Tensor) -> torch.Tensor:
        return (w.reshape(*w.shape[:-2], -1) - self.mean) @ self.components.T

    def lift(self, h: torch.Tensor) -> torch.Tensor:
        return (h @ self.components).reshape(*h.shape[:-1], *self.latent_shape)

    @property
    def network_dtype(self) -> torch.dtype:
        return self.decoder.out.weight.dtype

    def embed(self, segments: torch.Tensor, state=None):
        return self.audio_encoder(torch.as_tensor(segments).to(self.network_dtype), state)

    def decode(self, identity: torch.Tensor, embeddings: torch.Tensor):
        """Displaced codes ``w_I + h V`` and coordinates ``h`` for given embeddings."""
        h_identity = self.project(identity).to(self.network_dtype)
        h = self.decoder(h_identity, embeddings).to(DTYPE)
        return identity.unsqueeze(-3) + self.lift(h), h

    def forward(self, segments: torch.Tensor, identity: torch.Tensor, state=None):
        """Predicted codes ``(B, T, L, C)``, coordinates ``(B, T, k)`` and LSTM state."""
        embeddings, state = self.embed(segments, state)
        w_bar, h = self.decode(identity, embeddings)
        return w_bar, h, state


class Stage1Trainer:
    """One optimiser over the audio encoder and decoder; G and E_I stay frozen."""

    def __init__(
        self,
        cfg: Config,
        basis: PcaBasis,
        generator: Generator,
        encoder: ImageEncoder,
        extractor: PerceptualExtractor,
        clips: Sequence[Clip] = (),
        stage_cfg: Stage1Config | None = None,
    ):
        self.cfg = cfg
        self.scfg = stage_cfg or cfg.stage1
        self.scfg.validate()
        self.basis = basis
        self.generator = generator
        self.encoder = encoder
        self.extractor = extractor
        for frozen in (generator, encoder, extractor):
            frozen.requires_grad_(False)
        audio_encoder, decoder = build_stage1_models(cfg, basis.k, self.scfg.seed)
        decoder.set_identity_scale(basis.eigenvalues)
        self.optimizer = torch.optim.Adam(
            list(audio_encoder.parameters()) + list(decoder.parameters()), lr=self.scfg.lr, betas=tuple(self.scfg.betas)
        )
        self.rng = np.random.default_rng(self.scfg.seed)
        self.step_count = 0
        self.clips = []
        for clip in clips:
            if clip.n_frames < self.scfg.seq_len:
                raise DataError(f"clip {clip.record.clip_id} has {clip.n_frames} frames < seq_len {self.scfg.seq_len}")
            self.clips.append(self._prepare(clip))
        if self.clips:
            audio_encoder.fit_input_normalization(torch.cat([c["segments"] for c in self.clips]))
        self.model = TrajectoryModel(audio_encoder, decoder, basis)

    def _prepare(self, clip: Clip) -> dict:
        latents = torch.as_tensor(clip.latents, dtype=DTYPE)
        with torch.no_grad():
            resynth = self.generator(latents)
        return {
            "segments": torch.tensor(np.array(clip_segments(clip, self.cfg)), dtype=DTYPE),
            "latents": latents,
            "resynth": resynth,
        }

    def sample_batch(self) -> Batch:
        t = self.scfg.seq_len
        segs, targets, ids, frames = [], [], [], []
        for _ in range(self.scfg.batch_size):
            clip = self.clips[int(self.rng.integers(len(self.clips)))]
            n = clip["latents"].shape[0]
            start = int(self.rng.integers(n - t + 1))
            ident = int(self.rng.integers(t))
            segs.append(clip["segments"][start : start + t])
            targets.append(clip["latents"][start : start + t])
            ids.append(clip["latents"][start + ident])
            frames.append(clip["resynth"][start : start + t])
        return Batch(torch.stack(segs), torch.stack(targets), torch.stack(ids), torch.stack(frames))

    def losses(self, batch: Batch) -> tuple[torch.Tensor, dict]:
        s = self.scfg
        w_bar, _, _ = self.model(batch.segments, batch.identity)
        l_latent = latent_loss(batch.targets, w_bar, s.squared_l2).mean()
        generated = self.generator(w_bar)
        l_lpips = lpips_loss(generated, batch.target_frames, self.extractor, s.squared_l2).mean()
        for name, value in (("L_latent", l_latent), ("L_LPIPS", l_lpips)):
            if not torch.isfinite(value):
                raise NumericalError(f"stage-one loss term {name} is {value.item()} at step {self.step_count}")
        total = l_latent.new_zeros(())
        if not s.disable_latent_loss:
            total = total + s.lambda_latent * l_latent
        if not s.disable_lpips_loss:
            total = total + s.lambda_lpips * l_lpips
        report = {
            "step": self.step_count,
            "L_latent": float(l_latent.detach()),
            "L_LPIPS": float(l_lpips.detach()),
            "total": float(total.detach()),
        }
        return total, report

    def step(self, batch: Batch | None = None) -> dict:
        batch = batch if batch is not None else self.sample_batch()
        self.optimizer.zero_grad(set_to_none=True)
        total, report = self.losses(batch)
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return report

    def train(self, max_steps: int | None = None, log_path: str | Path | None = None, callback: Callable | None = None):
        max_steps = self.scfg.max_steps if max_steps is None else max_steps
        history = []
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(max_steps):
                report = self.step()
                history.append(report)
                if fh and (report["step"] % max(1, self.scfg.log_every) == 0 or report["step"] == max_steps - 1):
                    fh.write(json.dumps(report) + "\n")
                if callback:
                    callback(self, report)
        finally:
            if fh:
                fh.close()
        return history

    def fixed_batch(self, seed: int) -> Batch:
        """A batch drawn from a separate generator, for before/after comparisons."""
        saved, self.rng = self.rng, np.random.default_rng(seed)
        try:
            return self.sample_batch()
        finally:
            self.rng = saved

    def evaluate(self, batch: Batch) -> dict:
        with torch.no_grad():
            _, report = self.losses(batch)
        return report

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters() if p.requires_grad)

    def trainable_hash(self) -> str:
        return parameter_hash(self.model.audio_encoder, self.model.decoder)

    def save(self, path: str | Path) -> None:
        arrays = {**state_arrays("audio_encoder", self.model.audio_encoder), **state_arrays("decoder", self.model.decoder)}
        meta = base_meta("stage1", self.cfg, self.scfg.seed, k=self.basis.k, step=self.step_count)
        save_archive(path, arrays, meta)


def load_trajectory_model(path: str | Path, cfg: Config, basis: PcaBasis, force: bool = False) -> TrajectoryModel:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "stage1":
        raise DataError(f"{path} is not a stage-one checkpoint")
    check_fingerprint(meta, cfg, force)
    if meta.get("k") != basis.k:
        raise DataError(f"checkpoint was trained with k={meta.get('k')}, basis has k={basis.k}")
    audio_encoder, decoder = build_stage1_models(cfg, basis.k, meta.get("seed", 0))
    load_state("audio_encoder", audio_encoder, arrays)
    load_state("decoder", decoder, arrays)
    model = TrajectoryModel(audio_encoder, decoder, basis)
    model.requires_grad_(False)
    return model.eval()


def zero_trajectory_model(cfg: Config, basis: PcaBasis, seed: int = 0) -> TrajectoryModel:
    """A freshly initialised model; its decoder outputs zero displacements."""
    audio_encoder, decoder = build_stage1_models(cfg, basis.k, seed)
    model = TrajectoryModel(audio_encoder, decoder, basis)
    model.requires_grad_(False)
    return model.eval()


# -- stage two ------------------------------------------------------------


def stage2_loss(
    generator: Generator, pivots: torch.Tensor, frames: torch.Tensor, extractor: PerceptualExtractor, squared=False
) -> tuple[torch.Tensor, dict]:
    recon = generator(pivots)
    l_lpips = lpips_loss(recon, frames, extractor, squared)
    l_l2 = pixel_loss(frames, recon, squared)
    return l_lpips + l_l2, {"L_LPIPS": float(l_lpips.detach()), "L_L2": float(l_l2.detach())}


def stage2_tune(
    frames,
    generator: Generator,
    encoder: ImageEncoder,
    extractor: PerceptualExtractor,
    cfg: Stage2Config | None = None,
    log_path: str | Path | None = None,
) -> tuple[Generator, list[dict]]:
    """Tune a copy of ``generator`` on one clip (``(T, H, W, 3)``) or a single frame.

    Returns the tuned generator and the per-step loss history. The input
    generator and the encoder are left untouched.
    """
    cfg = cfg or Stage2Config()
    cfg.validate()
    frames = torch.as_tensor(np.asarray(frames), dtype=DTYPE)
    if frames.dim() == 3:
        frames = frames.unsqueeze(0)
    if frames.dim() != 4 or frames.shape[0] < 1:
        raise DataError("stage two needs at least one frame")
    torch.manual_seed(cfg.seed)
    with torch.no_grad():
        pivots = encoder(frames)
    tuned = copy.deepcopy(generator)
    tuned.requires_grad_(True)
    extractor.requires_grad_(False)
    optimizer = torch.optim.Adam(tuned.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))

    history = []
    initial = None
    above = 0
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.max_steps + 1):
            optimizer.zero_grad(set_to_none=True)
            loss, terms = stage2_loss(tuned, pivots, frames, extractor, cfg.squared_l2)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NumericalError(f"stage-two loss became {value} at step {step}")
            initial = value if initial is None else initial
            above = above + 1 if value > cfg.divergence_factor * initial else 0
            if above >= cfg.divergence_patience:
                raise NumericalError(
                    f"stage-two tuning diverged: loss {value:.4g} > {cfg.divergence_factor}x initial "
                    f"{initial:.4g} for {above} steps"
                )
            report = {"step": step, **terms, "total": value}
            history.append(report)
            if fh:
                fh.write(json.dumps(report) + "\n")
            if step == cfg.max_steps:
                break  # last entry records the loss after the final update
            loss.backward()
            optimizer.step()
    finally:
        if fh:
            fh.close()
    tuned.requires_grad_(False)
    return tuned, history


def save_generator(path: str | Path, generator: Generator, cfg: Config, subject: str, seed: int = 0) -> None:
    save_archive(path, state_arrays("generator", generator), base_meta("generator", cfg, seed, subject=subject))


def load_generator(path: str | Path, generator: Generator, cfg: Config, force: bool = False) -> Generator:
    """Load tuned weights into a copy of ``generator``."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "generator":
        raise DataError(f"{path} is not a generator checkpoint")
    check_fingerprint(meta, cfg, force)
    tuned = copy.deepcopy(generator)
    load_state("generator", tuned, arrays)
    tuned.requires_grad_(False)
    return tuned
