import json
import shutil
import warnings

import numpy as np
import pytest
from PIL import Image

from talking_latents.audio import Waveform, write_wav
from talking_latents.config import Config
from talking_latents.data import (
    ClipRecord,
    build_windows,
    frame_to_uint8,
    ingest_real_dataset,
    load_dataset,
    make_synthetic_dataset,
    read_frames,
    read_landmarks,
    resample_indices,
    split_speakers,
    uint8_to_frame,
    write_frames,
    write_landmarks,
)
from talking_latents.errors import DataError
from talking_latents.metrics import lmd


def records(n_speakers, clips=2):
    return [
        ClipRecord(clip_id=f"s{s}_c{c}", speaker_id=f"s{s:02d}", n_frames=25)
        for s in range(n_speakers)
        for c in range(clips)
    ]


def test_split_33_speakers_holdout_10():
    train, test = split_speakers(records(33), 10, seed=0)
    assert len({r.speaker_id for r in train}) == 23
    assert len({r.speaker_id for r in test}) == 10
    assert not {r.speaker_id for r in train} & {r.speaker_id for r in test}


def test_split_holdout_zero_and_seeded():
    train, test = split_speakers(records(5), 0)
    assert test == [] and len(train) == 10
    assert split_speakers(records(12), 4, seed=3) == split_speakers(records(12), 4, seed=3)


def test_split_too_few_speakers():
    with pytest.raises(DataError):
        split_speakers(records(10), 10)


def test_synthetic_inversion_matches_ground_truth(small_dataset):
    _, ds = small_dataset
    for clip in ds.clips:
        np.testing.assert_allclose(clip.latents, clip.true_latents, atol=1e-5)


def test_synthetic_structure(small_dataset):
    cfg, ds = small_dataset
    assert len(ds.clips) == 6 and ds.speakers() == ["spk000", "spk001", "spk002"]
    clip = ds.clips[0]
    assert clip.frames.shape == (30, 32, 32, 3)
    assert np.all(np.abs(clip.frames) < 1)
    assert clip.waveform.duration * 25 == pytest.approx(30)
    assert clip.landmarks.shape == (30, 20, 2)
    assert lmd(clip.landmarks, clip.landmarks) == 0.0
    # displacements from a clip's first frame span at most two directions
    disp = np.concatenate([(c.true_latents - c.true_latents[0]).reshape(30, -1) for c in ds.clips])
    assert np.linalg.matrix_rank(disp, tol=1e-8) <= 2


def test_distinct_seeds_distinct_identities():
    cfg = Config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = make_synthetic_dataset(cfg, 1, 1, 10, seed=1)
        b = make_synthetic_dataset(cfg, 1, 1, 10, seed=2)
    assert not np.allclose(a.clips[0].true_latents, b.clips[0].true_latents)


def test_synthetic_bad_sizes():
    with pytest.raises(DataError):
        make_synthetic_dataset(Config(), 0, 1, 10)


def test_build_windows(small_dataset):
    cfg, ds = small_dataset
    clip = ds.clips[1]
    windows = build_windows(clip, 8, seed=0, cfg=cfg)
    assert len(windows) == 30 - 8 + 1
    for i, win in enumerate(windows):
        assert win.start == i and 0 <= win.identity_index < 8
        assert win.segments.shape == (8, 12, 28)
        np.testing.assert_array_equal(win.target_latents, clip.latents[i : i + 8])
    assert [w.identity_index for w in build_windows(clip, 8, 0, cfg)] == [w.identity_index for w in windows]


def test_png_mapping_round_trip():
    values = np.arange(256, dtype=np.uint8)
    assert np.array_equal(frame_to_uint8(uint8_to_frame(values)), values)


def test_frames_and_landmarks_io(tmp_path, rng):
    frames = rng.uniform(-1, 1, size=(3, 8, 8, 3))
    write_frames(frames, tmp_path / "frames")
    back = read_frames(tmp_path / "frames")
    np.testing.assert_allclose(back, frames, atol=1 / 127.5)
    lm = rng.random((3, 5, 2))
    write_landmarks(tmp_path / "lm.txt", lm)
    np.testing.assert_allclose(read_landmarks(tmp_path / "lm.txt"), lm, atol=1e-6)


def test_read_frames_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        read_frames(tmp_path / "empty")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "000000.png").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_frames(tmp_path / "bad")


def test_archive_round_trip_and_latent_cache(tmp_path, small_dataset):
    cfg = Config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        make_synthetic_dataset(cfg, 2, 1, 12, seed=5, out_dir=tmp_path / "ds")
    root = tmp_path / "ds"
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["fingerprint"] == cfg.fingerprint()
    cdir = root / "clips" / manifest["clips"][0]["clip_id"]
    for name in ("frames/000000.png", "audio.wav", "landmarks.txt", "latents.bin"):
        assert (cdir / name).exists()
    loaded = load_dataset(root, cfg, with_frames=True)
    cached = loaded.clips[0].latents
    # drop the cache: latents are recomputed from the PNG frames and written back
    (cdir / "latents.bin").unlink()
    fresh = load_dataset(root, cfg).clips[0].latents
    again = load_dataset(root, cfg).clips[0].latents
    assert fresh.tobytes() == again.tobytes()
    np.testing.assert_allclose(fresh, cached, atol=0.05)
    assert loaded.clips[0].true_latents is not None


def test_resample_indices():
    np.testing.assert_array_equal(resample_indices(50, 50.0, 25.0), np.arange(1, 50, 2))
    idx = resample_indices(30, 30.0, 25.0)
    assert len(idx) == 25 and idx[-1] <= 29
    np.testing.assert_array_equal(resample_indices(10, 12.5, 25.0), np.repeat(np.arange(10), 2))


def _raw_clip(root, name, fps, n_frames, seconds, rng, meta=True, audio=True):
    cdir = root / name
    (cdir / "frames").mkdir(parents=True)
    for i in range(n_frames):
        Image.fromarray(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)).save(cdir / "frames" / f"{i:04d}.png")
    if audio:
        write_wav(cdir / "audio.wav", Waveform(0.1 * rng.normal(size=int(seconds * 16000))))
    if meta:
        (cdir / "meta.json").write_text(json.dumps({"fps": fps, "speaker_id": name.split("_")[0]}))


def test_ingest_resamples_and_skips(tmp_path, rng):
    raw = tmp_path / "raw"
    _raw_clip(raw, "alice_1", 50, 40, 0.8, rng)
    _raw_clip(raw, "bob_1", 25, 20, 0.4, rng)  # 20 frames vs 0.4 s of audio
    _raw_clip(raw, "carol_1", 25, 10, 0.4, rng, meta=False)
    _raw_clip(raw, "dave_1", 25, 10, 0.4, rng, audio=False)
    cfg = Config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recs, skipped = ingest_real_dataset(raw, tmp_path / "out", cfg)
    assert [r.clip_id for r in recs] == ["alice_1"]
    assert recs[0].n_frames == 20 and recs[0].speaker_id == "alice"
    reasons = {s["clip_id"]: s["reason"] for s in skipped}
    assert set(reasons) == {"bob_1", "carol_1", "dave_1"}
    assert "fps" in reasons["carol_1"] and "audio" in reasons["dave_1"]
    assert "20" in reasons["bob_1"]
    ds = load_dataset(tmp_path / "out", cfg)
    from talking_latents.data import clip_segments

    assert len(clip_segments(ds.clips[0], cfg)) == ds.clips[0].n_frames


def test_ingest_missing_root(tmp_path):
    with pytest.raises(DataError):
        ingest_real_dataset(tmp_path / "nope", tmp_path / "out", Config())


def test_load_dataset_without_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path, Config())
