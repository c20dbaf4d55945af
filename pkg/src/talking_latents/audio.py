"""MFCC features and per-frame audio segmentation.

Each output video frame ``t`` gets a 0.2 s audio window centred on the middle of
that frame's display interval, so the window spans two frames on each side.
The window is turned into an MFCC matrix and cropped to exactly
``segment_shape`` (12 x 28 by default).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .config import MfccConfig
from .errors import AlignmentError, DataError, DimensionError


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DimensionError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def normalized(self) -> "Waveform":
        peak = np.max(np.abs(self.samples)) if self.samples.size else 0.0
        if peak <= 1.0:
            return self
        return Waveform(self.samples / peak, self.sample_rate)


@dataclass(frozen=True)
class AudioSegment:
    mfcc: np.ndarray
    frame_index: int


@dataclass(frozen=True)
class SegmentSequence:
    segments: tuple[AudioSegment, ...]
    fps: float = 25.0
    _stack: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.segments)

    def stack(self) -> np.ndarray:
        """All segments as one ``(T, rows, cols)`` array."""
        if self._stack is None:
            arr = np.stack([s.mfcc for s in self.segments]) if self.segments else np.zeros((0, 0, 0))
            arr.setflags(write=False)
            object.__setattr__(self, "_stack", arr)
        return self._stack


def read_wav(path: str | Path) -> Waveform:
    """PCM WAV reader: 16-bit int or 32-bit float, stereo averaged to mono."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(rate)).normalized()


def write_wav(path: str | Path, waveform: Waveform) -> None:
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    n_bins = n_fft // 2 + 1
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def n_mfcc_steps(n_samples: int, cfg: MfccConfig) -> int:
    if n_samples < cfg.window_samples:
        return 0
    return 1 + (n_samples - cfg.window_samples) // cfg.hop_samples


def extract_mfcc(waveform: Waveform | np.ndarray, cfg: MfccConfig | None = None) -> np.ndarray:
    """MFCC matrix of shape ``(n_coeff, n_steps)``; columns are time steps."""
    cfg = cfg or MfccConfig()
    samples = waveform.samples if isinstance(waveform, Waveform) else np.asarray(waveform, dtype=np.float64)
    if samples.size < cfg.window_samples:
        raise DataError(
            f"waveform of {samples.size} samples is shorter than one analysis window ({cfg.window_samples})"
        )
    if cfg.hop_samples < 1 or cfg.n_fft < cfg.window_samples:
        raise DataError("invalid MFCC framing: need hop >= 1 and n_fft >= window")

    emphasized = np.concatenate([samples[:1], samples[1:] - cfg.preemphasis * samples[:-1]])
    steps = n_mfcc_steps(samples.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, cfg.window_samples)[:: cfg.hop_samples][:steps]
    frames = frames * np.hamming(cfg.window_samples)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2 / cfg.n_fft
    mel_energy = power @ mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate).T
    log_mel = np.log(np.maximum(mel_energy, cfg.log_floor))
    cepstra = dct(log_mel, type=2, axis=1, norm="ortho")
    start = 1 if cfg.drop_c0 else 0
    return cepstra[:, start : start + cfg.n_coeff].T


def _fit_steps(mfcc: np.ndarray, n_steps: int) -> np.ndarray:
    have = mfcc.shape[1]
    if have >= n_steps:
        off = (have - n_steps) // 2
        return mfcc[:, off : off + n_steps]
    # too few steps for the requested width: nearest-neighbour stretch
    idx = np.floor(np.arange(n_steps) * have / n_steps).astype(int)
    return mfcc[:, idx]


def segment_window(samples: np.ndarray, frame_index: int, cfg: MfccConfig) -> np.ndarray:
    """Edge-padded raw audio of the window centred on ``frame_index``."""
    seg_len = int(round(cfg.segment_seconds * cfg.sample_rate))
    center = (frame_index + 0.5) * cfg.sample_rate / cfg.fps
    start = int(round(center - seg_len / 2.0))
    idx = np.clip(np.arange(start, start + seg_len), 0, samples.size - 1)
    return samples[idx]


def segment_audio(waveform: Waveform, n_frames: int, cfg: MfccConfig | None = None) -> SegmentSequence:
    """One MFCC segment per output frame, aligned one-to-one."""
    cfg = cfg or MfccConfig()
    if waveform.sample_rate != cfg.sample_rate:
        raise DataError(f"waveform sample rate {waveform.sample_rate} != configured {cfg.sample_rate}")
    if n_frames < 1:
        raise AlignmentError("at least one frame is required", 0, n_frames)
    audio_frames = waveform.duration * cfg.fps
    if abs(audio_frames - n_frames) > 1.0:
        raise AlignmentError(
            f"audio covers {audio_frames:.2f} frames ({waveform.duration:.3f} s) "
            f"but {n_frames} video frames were requested",
            audio_frames,
            n_frames,
        )
    eff = cfg.effective()
    segments = []
    for t in range(n_frames):
        window = segment_window(waveform.samples, t, eff)
        mfcc = _fit_steps(extract_mfcc(window, eff), eff.n_steps)
        if cfg.mfcc_transposed:
            mfcc = mfcc.T
        mfcc = np.ascontiguousarray(mfcc)
        mfcc.setflags(write=False)
        segments.append(AudioSegment(mfcc=mfcc, frame_index=t))
    return SegmentSequence(tuple(segments), cfg.fps)


def frame_count(waveform: Waveform, fps: float = 25.0) -> int:
    return int(np.floor(waveform.duration * fps + 1e-9))
