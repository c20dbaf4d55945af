"""End-to-end inference: identity frame + speech audio -> talking-head frames."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, frame_count, segment_audio
from .config import Config
from .data import write_frames
from .errors import AlignmentError, DimensionError
from .latent_space import PcaBasis
from .models import DTYPE, Generator, ImageEncoder
from .training import TrajectoryModel


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [-1, 1]
    latents: np.ndarray  # (T, L, C) displaced codes
    identity_latent: np.ndarray  # (L, C)
    coords: np.ndarray  # (T, k) subspace coordinates

    def __len__(self) -> int:
        return len(self.frames)

    def save(self, out_dir: str | Path, with_latents: bool = True) -> None:
        out_dir = Path(out_dir)
        write_frames(self.frames, out_dir / "frames")
        if with_latents:
            np.savez(out_dir / "trajectory.npz", latents=self.latents, identity=self.identity_latent, coords=self.coords)


class Pipeline:
    """Binds E_I, the trajectory model (E_A + D + basis) and a generator.

    ``base_generator`` is the frozen pre-trained generator; ``generator`` may be
    a stage-two tuned copy. :meth:`generate_stage1_only` always renders with the
    base generator.
    """

    def __init__(
        self,
        cfg: Config,
        encoder: ImageEncoder,
        model: TrajectoryModel,
        basis: PcaBasis,
        generator: Generator,
        base_generator: Generator | None = None,
    ):
        if tuple(model.latent_shape) != tuple(generator.latent_shape) or basis.latent_shape != tuple(
            generator.latent_shape
        ):
            raise DimensionError("basis, trajectory model and generator disagree on the latent shape")
        self.cfg = cfg
        self.encoder = encoder
        self.model = model.eval()
        self.basis = basis
        self.generator = generator
        self.base_generator = base_generator if base_generator is not None else generator

    def invert_identity(self, identity) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder(torch.as_tensor(np.asarray(identity), dtype=DTYPE))

    def _segments(self, waveform: Waveform, n_frames: int | None):
        if n_frames is None:
            n_frames = frame_count(waveform, self.cfg.audio.fps)
        if n_frames < 1:
            raise AlignmentError(
                f"audio of {waveform.duration:.3f} s is too short for one frame at {self.cfg.audio.fps} fps", 0, 1
            )
        return segment_audio(waveform, n_frames, self.cfg.audio)

    def generate(
        self, identity, waveform: Waveform, n_frames: int | None = None, timings: dict | None = None, stage1_only=False
    ) -> VideoClip:
        """Generate the whole clip. Runs the same per-step computation as
        :meth:`stream`, so the result does not depend on how the audio is chunked."""
        clock = _Clock(timings)
        w_identity = self.invert_identity(identity)
        clock.lap("image_encoder")
        segments = self._segments(waveform, n_frames)
        clock.lap("audio_frontend")
        frames, latents, coords = [], [], []
        for frame, latent, h in self._steps(w_identity, segments, stage1_only, clock):
            frames.append(frame)
            latents.append(latent)
            coords.append(h)
        return VideoClip(np.stack(frames), np.stack(latents), w_identity.numpy(), np.stack(coords))

    def generate_stage1_only(self, identity, waveform: Waveform, n_frames: int | None = None, timings=None):
        return self.generate(identity, waveform, n_frames, timings, stage1_only=True)

    def stream(self, identity, waveform: Waveform, n_frames: int | None = None, stage1_only=False):
        """Yield ``(frame, latent)`` one time step at a time with carried LSTM state."""
        w_identity = self.invert_identity(identity)
        for frame, latent, _ in self._steps(w_identity, self._segments(waveform, n_frames), stage1_only):
            yield frame, latent

    def _steps(self, w_identity, segments, stage1_only=False, clock=None):
        generator = self.base_generator if stage1_only else self.generator
        clock = clock or _Clock(None)
        state = None
        w_identity = w_identity.unsqueeze(0)
        with torch.no_grad():
            for seg in segments.segments:
                x = torch.tensor(np.array(seg.mfcc), dtype=DTYPE)[None, None]
                embedding, state = self.model.embed(x, state)
                clock.lap("audio_encoder")
                w_bar, h = self.model.decode(w_identity, embedding)
                clock.lap("latent_decoder")
                frame = generator(w_bar[0, 0])
                clock.lap("generator")
                yield frame.numpy(), w_bar[0, 0].numpy(), h[0, 0].numpy()


class _Clock:
    def __init__(self, sink: dict | None):
        self.sink = sink
        self.last = time.perf_counter()

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        if self.sink is not None:
            self.sink[name] = self.sink.get(name, 0.0) + now - self.last
        self.last = now


def trajectory_error(pipeline: Pipeline, clip, identity_index: int = 0) -> tuple[float, float]:
    """Mean squared latent error of a generated trajectory and the mean squared
    ground-truth displacement from the identity frame's latent, for one clip."""
    truth = clip.true_latents if clip.true_latents is not None else clip.latents
    identity = clip.frames[identity_index]
    out = pipeline.generate(identity, clip.waveform, n_frames=clip.n_frames)
    err = np.sum((out.latents - truth) ** 2, axis=(1, 2)).mean()
    energy = np.sum((truth - out.identity_latent) ** 2, axis=(1, 2)).mean()
    return float(err), float(energy)
