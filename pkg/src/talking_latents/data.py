"""Dataset archive, speaker splits, training windows and the synthetic dataset.

Archive layout::

    manifest.json
    clips/<clip_id>/frames/000000.png ...
    clips/<clip_id>/audio.wav
    clips/<clip_id>/landmarks.txt
    clips/<clip_id>/latents.bin      # .npy payload, (T, L, C) float64
    clips/<clip_id>/truth.npz        # synthetic clips only
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .audio import SegmentSequence, Waveform, read_wav, segment_audio, write_wav
from .config import TOOL_VERSION, Config
from .errors import DataError, DimensionError
from .models import DTYPE, ImageEncoder, build_toy_pair

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass
class ClipRecord:
    clip_id: str
    speaker_id: str
    n_frames: int
    fps: float = 25.0
    frames_dir: str = ""
    audio_path: str = ""
    landmarks_path: str | None = None
    latents_path: str | None = None

    def clip_dir(self, root: Path) -> Path:
        return Path(root) / "clips" / self.clip_id


@dataclass
class Clip:
    """A fully loaded clip. Frames are float ``(T, H, W, 3)`` in ``[-1, 1]``."""

    record: ClipRecord
    waveform: Waveform
    latents: np.ndarray
    frames: np.ndarray | None = None
    landmarks: np.ndarray | None = None
    segments: np.ndarray | None = None
    # synthetic clips only: (T, 3) driving signal (two tone levels, voiced flag),
    # (T, 2) mouth coordinates and the exact latent trajectory
    driving: np.ndarray | None = None
    mouth: np.ndarray | None = None
    true_latents: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.record.n_frames


@dataclass(frozen=True)
class TrainingWindow:
    clip_id: str
    start: int
    segments: np.ndarray  # (T, rows, cols)
    target_latents: np.ndarray  # (T, L, C)
    identity_index: int  # position within the window
    target_frames: np.ndarray | None = None

    @property
    def identity_latent(self) -> np.ndarray:
        return self.target_latents[self.identity_index]


@dataclass
class Dataset:
    root: Path | None
    clips: list[Clip] = field(default_factory=list)
    fingerprint: str = ""

    def by_id(self) -> dict[str, Clip]:
        return {c.record.clip_id: c for c in self.clips}

    def speakers(self) -> list[str]:
        return sorted({c.record.speaker_id for c in self.clips})


# -- frame / landmark IO --------------------------------------------------


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_frame(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def write_frames(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        Image.fromarray(frame_to_uint8(frame), mode="RGB").save(directory / f"{i:06d}.png")


def read_frames(directory: Path, image_shape=None) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise DataError(f"no PNG frames in {directory}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                im = im.convert("RGB")
                if image_shape is not None and (im.height, im.width) != tuple(image_shape[:2]):
                    im = im.resize((image_shape[1], image_shape[0]), Image.BILINEAR)
                frames.append(uint8_to_frame(np.asarray(im)))
        except OSError as exc:
            raise DataError(f"unreadable frame {p}: {exc}") from exc
    return np.stack(frames)


def write_landmarks(path: Path, landmarks: np.ndarray) -> None:
    """One row per frame: frame_index then M x,y pairs."""
    t, m, _ = landmarks.shape
    with open(path, "w") as fh:
        fh.write(f"# frame_index then {m} x,y pairs\n")
        for i in range(t):
            coords = " ".join(f"{v:.6f}" for v in landmarks[i].reshape(-1))
            fh.write(f"{i} {coords}\n")


def read_landmarks(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values = line.split()
            if (len(values) - 1) % 2:
                raise DataError(f"{path}: odd number of coordinates in row {values[0]}")
            rows.append((int(values[0]), np.array(values[1:], dtype=np.float64).reshape(-1, 2)))
    if not rows:
        raise DataError(f"{path}: no landmark rows")
    rows.sort(key=lambda r: r[0])
    if [r[0] for r in rows] != list(range(len(rows))):
        raise DataError(f"{path}: frame indices must run 0..T-1")
    return np.stack([r[1] for r in rows])


def _atomic_save_npy(path: Path, array: np.ndarray) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.save(fh, array)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def invert_frames(encoder: ImageEncoder, frames: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return encoder(torch.as_tensor(frames, dtype=DTYPE)).numpy()


# -- manifest -------------------------------------------------------------


def write_manifest(root: Path, records: list[ClipRecord], cfg: Config, extra: dict | None = None) -> None:
    payload = {
        "tool_version": TOOL_VERSION,
        "fingerprint": cfg.fingerprint(),
        "clips": [asdict(r) for r in records],
    }
    if extra:
        payload.update(extra)
    (Path(root) / MANIFEST).write_text(json.dumps(payload, indent=1))


def read_manifest(root: Path) -> tuple[list[ClipRecord], dict]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    payload = json.loads(path.read_text())
    return [ClipRecord(**r) for r in payload["clips"]], payload


def load_dataset(root: str | Path, cfg: Config, encoder: ImageEncoder | None = None, with_frames=False) -> Dataset:
    """Load every clip in an archive, computing and caching missing latents."""
    root = Path(root)
    records, payload = read_manifest(root)
    if encoder is None:
        _, encoder = build_toy_pair(cfg)
    clips = []
    for rec in records:
        cdir = rec.clip_dir(root)
        waveform = read_wav(cdir / "audio.wav")
        latents_path = cdir / "latents.bin"
        frames = None
        if latents_path.exists():
            latents = np.load(latents_path, allow_pickle=False)
        else:
            frames = read_frames(cdir / "frames", cfg.image.shape)
            latents = invert_frames(encoder, frames)
            _atomic_save_npy(latents_path, latents)
        if latents.shape != (rec.n_frames, *cfg.latent.shape):
            raise DimensionError(f"clip {rec.clip_id}: cached latents have shape {latents.shape}")
        if with_frames and frames is None:
            frames = read_frames(cdir / "frames", cfg.image.shape)
        landmarks = read_landmarks(cdir / "landmarks.txt") if (cdir / "landmarks.txt").exists() else None
        truth = {}
        if (cdir / "truth.npz").exists():
            with np.load(cdir / "truth.npz") as archive:
                truth = {"driving": archive["driving"], "mouth": archive["mouth"], "true_latents": archive["latents"]}
        clips.append(Clip(rec, waveform, latents, frames, landmarks, **truth))
    return Dataset(root, clips, payload.get("fingerprint", ""))


def clip_segments(clip: Clip, cfg: Config) -> np.ndarray:
    if clip.segments is None:
        seq: SegmentSequence = segment_audio(clip.waveform, clip.n_frames, cfg.audio)
        clip.segments = seq.stack()
    return clip.segments


# -- splits and windows ---------------------------------------------------


def split_speakers(records, n_holdout: int, seed: int = 0):
    """Speaker-disjoint (train, test) split holding out ``n_holdout`` speakers.

    Accepts ClipRecords or anything with a ``record`` attribute (e.g. Clip).
    """
    def speaker(item):
        return (item.record if hasattr(item, "record") else item).speaker_id

    speakers = sorted({speaker(r) for r in records})
    if n_holdout < 0:
        raise DataError("n_holdout must be nonnegative")
    if len(speakers) < n_holdout + 1:
        raise DataError(f"need at least {n_holdout + 1} speakers to hold out {n_holdout}, found {len(speakers)}")
    order = np.random.default_rng(seed).permutation(len(speakers))
    held = {speakers[i] for i in order[:n_holdout]}
    train = [r for r in records if speaker(r) not in held]
    test = [r for r in records if speaker(r) in held]
    return train, test


def build_windows(clip: Clip, seq_len: int, seed: int, cfg: Config) -> list[TrainingWindow]:
    """Stride-1 windows of ``seq_len`` consecutive frames, each with a random identity frame."""
    if seq_len < 1:
        raise DataError("window length must be positive")
    segments = clip_segments(clip, cfg)
    if len(segments) != clip.n_frames:
        raise DataError(f"clip {clip.record.clip_id}: {len(segments)} segments for {clip.n_frames} frames")
    rng = np.random.default_rng(seed)
    windows = []
    for start in range(clip.n_frames - seq_len + 1):
        stop = start + seq_len
        windows.append(
            TrainingWindow(
                clip_id=clip.record.clip_id,
                start=start,
                segments=segments[start:stop],
                target_latents=clip.latents[start:stop],
                identity_index=int(rng.integers(seq_len)),
                target_frames=None if clip.frames is None else clip.frames[start:stop],
            )
        )
    return windows


# -- synthetic data -------------------------------------------------------

# Maps the 2-d driving signal (two normalized tone frequencies) to mouth coordinates.
DRIVE_TO_MOUTH = np.array([[1.5, 0.3], [-0.4, 1.2]])
TONE_BANDS = ((250.0, 700.0), (1200.0, 3000.0))
TONE_AMPLITUDE = 0.3


def driving_signal(n_frames: int, rng: np.random.Generator, n_levels: int = 3) -> np.ndarray:
    """Piecewise-constant 'syllables' of 4-10 frames; about one in five is silent.

    Each voiced syllable picks both tone levels from ``n_levels`` evenly spaced
    values in ``[0, 1]``.
    """
    drive = np.zeros((n_frames, 2))
    voiced = np.zeros(n_frames, dtype=bool)
    t = 0
    while t < n_frames:
        length = int(rng.integers(4, 11))
        if rng.random() >= 0.2:
            drive[t : t + length] = rng.integers(n_levels, size=2) / (n_levels - 1)
            voiced[t : t + length] = True
        t += length
    return np.concatenate([drive, voiced[:, None].astype(np.float64)], axis=1)


def render_tones(drive: np.ndarray, sample_rate: int, fps: float) -> np.ndarray:
    """Phase-continuous two-tone audio following the per-frame driving signal."""
    n_frames = drive.shape[0]
    n_samples = int(round(n_frames * sample_rate / fps))
    frame_of_sample = np.minimum((np.arange(n_samples) * fps / sample_rate).astype(int), n_frames - 1)
    audio = np.zeros(n_samples)
    voiced = drive[frame_of_sample, 2]
    for j, (lo, hi) in enumerate(TONE_BANDS):
        freq = lo + (hi - lo) * drive[frame_of_sample, j]
        phase = 2.0 * np.pi * np.cumsum(freq) / sample_rate
        audio += TONE_AMPLITUDE * voiced * np.sin(phase)
    return audio


def mouth_landmarks(mouth: np.ndarray, image_shape, n_points: int = 20) -> np.ndarray:
    """Analytic mouth outline: outer and inner lip ellipses driven by mouth coordinates.

    ``mouth`` is ``(T, 2)``: opening then width. Returns ``(T, n_points, 2)`` x,y pixels.
    """
    h, w = image_shape[:2]
    n_outer = (n_points * 3) // 5
    n_inner = n_points - n_outer
    cx, cy = w / 2.0, 0.72 * h
    half_w = w * (0.16 + 0.03 * mouth[:, 1])
    half_h = h * (0.02 + 0.04 * np.clip(mouth[:, 0], 0.0, None))
    pts = []
    for n, shrink in ((n_outer, 1.0), (n_inner, 0.6)):
        ang = 2.0 * np.pi * np.arange(n) / n
        x = cx + shrink * half_w[:, None] * np.cos(ang)[None, :]
        y = cy + shrink * half_h[:, None] * np.sin(ang)[None, :]
        pts.append(np.stack([x, y], axis=-1))
    return np.concatenate(pts, axis=1)


def make_synthetic_dataset(
    cfg: Config,
    n_speakers: int | None = None,
    clips_per_speaker: int | None = None,
    frames_per_clip: int | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> Dataset:
    """Speakers with random identity latents talking along two fixed mouth directions.

    Identity latents are orthogonal to the mouth directions, so the mouth state
    of any frame can be read off its latent. The mouth coordinates at frame
    ``t`` are ``DRIVE_TO_MOUTH @ drive_t`` (silent frames are closed), the audio is two tones whose
    frequencies encode ``drive_t``, and frames are toy-generator renders of
    ``w_identity + mouth_t[0] u_0 + mouth_t[1] u_1``.
    """
    d = cfg.data
    n_speakers = d.n_speakers if n_speakers is None else n_speakers
    clips_per_speaker = d.clips_per_speaker if clips_per_speaker is None else clips_per_speaker
    frames_per_clip = d.frames_per_clip if frames_per_clip is None else frames_per_clip
    seed = d.seed if seed is None else seed
    if min(n_speakers, clips_per_speaker, frames_per_clip) < 1:
        raise DataError("synthetic dataset sizes must be positive")

    generator, encoder = build_toy_pair(cfg)
    rng = np.random.default_rng(seed)
    dim = cfg.latent.dim
    directions, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    directions = directions.T  # (2, D) orthonormal mouth directions

    clips = []
    for s in range(n_speakers):
        speaker_id = f"spk{s:03d}"
        identity = 0.8 * rng.normal(size=dim)
        identity -= directions.T @ (directions @ identity)  # a closed mouth: no mouth component
        for c in range(clips_per_speaker):
            drive = driving_signal(frames_per_clip, rng)
            mouth = (drive[:, :2] @ DRIVE_TO_MOUTH.T) * drive[:, 2:3]
            latents = (identity[None, :] + mouth @ directions).reshape(frames_per_clip, *cfg.latent.shape)
            with torch.no_grad():
                frames = generator(torch.as_tensor(latents, dtype=DTYPE)).numpy()
            waveform = Waveform(render_tones(drive, cfg.audio.sample_rate, cfg.audio.fps), cfg.audio.sample_rate)
            landmarks = mouth_landmarks(mouth, cfg.image.shape, cfg.metrics.n_mouth_landmarks)
            record = ClipRecord(
                clip_id=f"{speaker_id}_c{c:03d}",
                speaker_id=speaker_id,
                n_frames=frames_per_clip,
                fps=cfg.audio.fps,
            )
            clips.append(
                Clip(
                    record,
                    waveform,
                    invert_frames(encoder, frames),
                    frames,
                    landmarks,
                    driving=drive,
                    mouth=mouth,
                    true_latents=latents,
                )
            )

    dataset = Dataset(None if out_dir is None else Path(out_dir), clips, cfg.fingerprint())
    if out_dir is not None:
        write_dataset(dataset, Path(out_dir), cfg, extra={"synthetic": {"seed": seed, "directions": directions.tolist()}})
    return dataset


def write_dataset(dataset: Dataset, root: Path, cfg: Config, extra: dict | None = None) -> None:
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for clip in dataset.clips:
        rec = clip.record
        cdir = rec.clip_dir(root)
        cdir.mkdir(parents=True, exist_ok=True)
        if clip.frames is not None:
            write_frames(clip.frames, cdir / "frames")
        write_wav(cdir / "audio.wav", clip.waveform)
        rec.frames_dir = str(Path("clips") / rec.clip_id / "frames")
        rec.audio_path = str(Path("clips") / rec.clip_id / "audio.wav")
        if clip.landmarks is not None:
            write_landmarks(cdir / "landmarks.txt", clip.landmarks)
            rec.landmarks_path = str(Path("clips") / rec.clip_id / "landmarks.txt")
        _atomic_save_npy(cdir / "latents.bin", clip.latents)
        rec.latents_path = str(Path("clips") / rec.clip_id / "latents.bin")
        if clip.driving is not None:
            truth = clip.latents if clip.true_latents is None else clip.true_latents
            np.savez(cdir / "truth.npz", driving=clip.driving, mouth=clip.mouth, latents=truth)
        records.append(rec)
    dataset.root = root
    write_manifest(root, records, cfg, extra)


# -- real data ingestion --------------------------------------------------


@dataclass
class IngestLayout:
    """Input layout: ``<root>/<clip_id>/{frames/*.png, audio.wav, meta.json}``.

    ``meta.json`` must give ``fps`` and may give ``speaker_id`` (defaults to the
    part of the clip id before the first ``_``).
    """

    frames_subdir: str = "frames"
    frame_glob: str = "*.png"
    audio_name: str = "audio.wav"
    meta_name: str = "meta.json"
    landmarks_name: str = "landmarks.txt"


def resample_indices(n_source: int, source_fps: float, target_fps: float = 25.0) -> np.ndarray:
    """Nearest-frame indices that resample a clip to ``target_fps``.

    Target frame ``j`` takes the source frame whose display interval contains
    the target frame's centre time ``(j + 0.5) / target_fps``.
    """
    n_target = int(np.floor(n_source * target_fps / source_fps + 1e-9))
    idx = np.floor((np.arange(n_target) + 0.5) * source_fps / target_fps).astype(int)
    return np.minimum(idx, n_source - 1)


def ingest_real_dataset(
    root: str | Path, out_dir: str | Path, cfg: Config, layout: IngestLayout | None = None, encoder=None
) -> tuple[list[ClipRecord], list[dict]]:
    """Validate aligned clips, resample them to the target fps and write an archive.

    Bad clips are skipped; the second return value lists ``{clip_id, reason}``.
    """
    layout = layout or IngestLayout()
    root, out_dir = Path(root), Path(out_dir)
    if not root.is_dir():
        raise DataError(f"input root {root} is not a directory")
    if encoder is None:
        _, encoder = build_toy_pair(cfg)
    fps = cfg.audio.fps
    records, skipped = [], []
    clips = []
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        clip_id = cdir.name
        try:
            meta_path = cdir / layout.meta_name
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
            if "fps" not in meta:
                raise DataError("fps metadata absent")
            audio_path = cdir / layout.audio_name
            if not audio_path.exists():
                raise DataError("missing audio")
            waveform = read_wav(audio_path)
            if waveform.sample_rate != cfg.audio.sample_rate:
                raise DataError(f"sample rate {waveform.sample_rate} != {cfg.audio.sample_rate}")
            source = read_frames(cdir / layout.frames_subdir, cfg.image.shape)
            idx = resample_indices(len(source), float(meta["fps"]), fps)
            frames = source[idx]
            if abs(waveform.duration * fps - len(frames)) > 1.0:
                raise DataError(f"audio covers {waveform.duration * fps:.2f} frames, video has {len(frames)}")
            landmarks = None
            if (cdir / layout.landmarks_name).exists():
                source_landmarks = read_landmarks(cdir / layout.landmarks_name)
                landmarks = source_landmarks[np.minimum(idx, len(source_landmarks) - 1)]
            speaker = str(meta.get("speaker_id", clip_id.split("_")[0]))
            record = ClipRecord(clip_id=clip_id, speaker_id=speaker, n_frames=len(frames), fps=fps)
            clips.append(Clip(record, waveform, invert_frames(encoder, frames), frames, landmarks))
        except (DataError, OSError, ValueError, KeyError) as exc:
            skipped.append({"clip_id": clip_id, "reason": str(exc)})
            log.warning("skipping clip %s: %s", clip_id, exc)
    dataset = Dataset(out_dir, clips, cfg.fingerprint())
    write_dataset(dataset, out_dir, cfg, extra={"skipped": skipped})
    records = [c.record for c in clips]
    return records, skipped
