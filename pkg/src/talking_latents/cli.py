"""Command line interface.

Every subcommand reads the structured config (``--config``), applies ``--set
key=value`` overrides and its own flags, and writes the merged effective config
next to its outputs. Errors are reported as one JSON record on stderr; exit
codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .audio import Waveform, read_wav
from .config import Config, load_config, save_config
from .errors import ConfigError, DataError, TalkingLatentsError

log = logging.getLogger("talking_latents")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        payload = {"time": round(record.created, 3), "level": record.levelname.lower(), "msg": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload)


def _emit(event: str, **fields) -> None:
    log.info(event, extra={"fields": fields})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(json.dumps({"error": "ConfigError", "message": message, "exit_code": 2}) + "\n")
        sys.exit(2)


def _parse_value(text: str):
    return yaml.safe_load(text)


def effective_config(args) -> Config:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if overrides:
        cfg = cfg.override(overrides)
    return cfg


def _write_effective(cfg: Config, out: Path) -> None:
    target = out / "effective_config.yaml" if out.is_dir() else out.with_name(out.name + ".config.yaml")
    save_config(cfg, target)


# -- subcommands ----------------------------------------------------------


def cmd_synth_data(args, cfg: Config) -> dict:
    from .data import make_synthetic_dataset

    d = cfg.data
    if args.speakers is not None:
        d.n_speakers = args.speakers
    if args.clips is not None:
        d.clips_per_speaker = args.clips
    if args.frames is not None:
        d.frames_per_clip = args.frames
    if args.seed is not None:
        d.seed = args.seed
    out = Path(args.out)
    ds = make_synthetic_dataset(cfg, out_dir=out)
    _write_effective(cfg, out)
    return {"out": str(out), "clips": len(ds.clips), "speakers": len(ds.speakers())}


def cmd_ingest(args, cfg: Config) -> dict:
    from .data import ingest_real_dataset

    out = Path(args.out)
    records, skipped = ingest_real_dataset(args.root, out, cfg)
    _write_effective(cfg, out)
    return {"out": str(out), "clips": len(records), "skipped": skipped}


def _split(dataset, cfg: Config):
    from .data import split_speakers

    return split_speakers(dataset.clips, cfg.data.n_holdout, cfg.data.seed)


def _load_data(path, cfg: Config, with_frames=False):
    from .data import load_dataset

    ds = load_dataset(path, cfg, with_frames=with_frames)
    if ds.fingerprint and ds.fingerprint != cfg.fingerprint():
        raise ConfigError(f"dataset fingerprint {ds.fingerprint} does not match config {cfg.fingerprint()}")
    return ds


def cmd_fit_pca(args, cfg: Config) -> dict:
    from .latent_space import fit_pca

    if args.k is not None:
        cfg.latent.k = args.k
    if args.holdout is not None:
        cfg.data.n_holdout = args.holdout
    ds = _load_data(args.data, cfg)
    train, test = _split(ds, cfg)
    codes = np.concatenate([c.latents for c in train])
    basis = fit_pca(codes, cfg.latent.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    basis.save(out)
    split = {
        "train": sorted({c.record.speaker_id for c in train}),
        "test": sorted({c.record.speaker_id for c in test}),
    }
    out.with_name(out.name + ".split.json").write_text(json.dumps(split, indent=1))
    _write_effective(cfg, out)
    return {"out": str(out), "k": basis.k, "eigenvalues": basis.eigenvalues.tolist(), "n_codes": len(codes), **split}


def _toy_models(cfg: Config):
    from .models import build_extractor, build_toy_pair

    generator, encoder = build_toy_pair(cfg)
    return generator, encoder, build_extractor(cfg)


def cmd_train(args, cfg: Config) -> dict:
    from .latent_space import PcaBasis
    from .pipeline import Pipeline, trajectory_error
    from .training import Stage1Trainer

    s = cfg.stage1
    if args.steps is not None:
        s.max_steps = args.steps
    if args.seed is not None:
        s.seed = args.seed
    if args.holdout is not None:
        cfg.data.n_holdout = args.holdout
    s.disable_latent_loss = s.disable_latent_loss or args.no_latent_loss
    s.disable_lpips_loss = s.disable_lpips_loss or args.no_lpips_loss
    s.validate()
    basis = PcaBasis.load(args.basis)
    if basis.latent_shape != cfg.latent.shape:
        raise ConfigError(f"basis latent shape {basis.latent_shape} != config {cfg.latent.shape}")
    ds = _load_data(args.data, cfg, with_frames=True)
    train, test = _split(ds, cfg)
    generator, encoder, extractor = _toy_models(cfg)
    trainer = Stage1Trainer(cfg, basis, generator, encoder, extractor, train)
    eval_batch = trainer.fixed_batch(seed=s.seed + 1000)
    initial = trainer.evaluate(eval_batch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    log_path.write_text("")
    start = time.perf_counter()

    def on_step(tr, report):
        if s.checkpoint_every and tr.step_count % s.checkpoint_every == 0:
            tr.save(out)

    trainer.train(log_path=log_path, callback=on_step)
    final = trainer.evaluate(eval_batch)
    trainer.save(out)
    _write_effective(cfg, out)
    result = {
        "out": str(out),
        "steps": trainer.step_count,
        "seconds": round(time.perf_counter() - start, 2),
        "initial_total": initial["total"],
        "final_total": final["total"],
        "loss_ratio": final["total"] / initial["total"] if initial["total"] > 0 else 0.0,
        "parameters": trainer.parameter_count(),
    }
    if test:
        pipe = Pipeline(cfg, encoder, trainer.model.eval(), basis, generator)
        errs = [trajectory_error(pipe, clip) for clip in test]
        result["heldout_latent_mse"] = float(np.mean([e for e, _ in errs]))
        result["heldout_displacement_energy"] = float(np.mean([g for _, g in errs]))
        result["heldout_ratio"] = result["heldout_latent_mse"] / result["heldout_displacement_energy"]
    return result


def _read_image(path) -> np.ndarray:
    from PIL import Image

    from .data import uint8_to_frame

    try:
        with Image.open(path) as im:
            return uint8_to_frame(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def cmd_tune(args, cfg: Config) -> dict:
    from .training import save_generator, stage2_tune

    if args.steps is not None:
        cfg.stage2.max_steps = args.steps
    if args.image:
        frames = _read_image(args.image)[None]
        subject = Path(args.image).stem
    else:
        if not args.data:
            raise ConfigError("--clip requires --data")
        ds = _load_data(args.data, cfg, with_frames=True)
        clips = ds.by_id()
        if args.clip not in clips:
            raise DataError(f"clip {args.clip!r} not in dataset")
        frames = clips[args.clip].frames
        subject = args.clip
    generator, encoder, extractor = _toy_models(cfg)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("")
    tuned, history = stage2_tune(frames, generator, encoder, extractor, cfg.stage2, log_path=log_path)
    save_generator(out, tuned, cfg, subject, cfg.stage2.seed)
    _write_effective(cfg, out)
    return {
        "out": str(out),
        "subject": subject,
        "frames": len(frames),
        "initial_loss": history[0]["total"],
        "final_loss": history[-1]["total"],
        "initial_L2": history[0]["L_L2"],
        "final_L2": history[-1]["L_L2"],
    }


def _build_pipeline(args, cfg: Config):
    from .latent_space import PcaBasis
    from .pipeline import Pipeline
    from .training import load_generator, load_trajectory_model

    basis = PcaBasis.load(args.basis)
    model = load_trajectory_model(args.checkpoint, cfg, basis, force=args.force)
    generator, encoder, _ = _toy_models(cfg)
    tuned = generator
    if getattr(args, "generator", None):
        tuned = load_generator(args.generator, generator, cfg, force=args.force)
    return Pipeline(cfg, encoder, model, basis, tuned, base_generator=generator)


def cmd_generate(args, cfg: Config) -> dict:
    pipe = _build_pipeline(args, cfg)
    identity = _read_image(args.identity)
    waveform = read_wav(args.audio)
    clip = pipe.generate(identity, waveform, stage1_only=args.stage1_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clip.save(out, with_latents=not args.no_trajectory)
    _write_effective(cfg, out)
    return {"out": str(out), "frames": len(clip), "stage1_only": bool(args.stage1_only)}


def _clip_dirs(root: Path) -> dict[str, Path]:
    if (root / "frames").is_dir():
        return {root.name: root}
    base = root / "clips" if (root / "clips").is_dir() else root
    return {p.name: p for p in sorted(base.iterdir()) if (p / "frames").is_dir()}


def cmd_evaluate(args, cfg: Config) -> dict:
    from .data import read_frames, read_landmarks
    from .metrics import evaluate_clips, format_report
    from .models import build_extractor

    pred_dirs = _clip_dirs(Path(args.pred))
    gt_dirs = _clip_dirs(Path(args.gt))
    if len(pred_dirs) == 1 and len(gt_dirs) == 1:
        pairs = [(next(iter(pred_dirs.values())), next(iter(gt_dirs.values())))]
    else:
        missing = sorted(set(gt_dirs) - set(pred_dirs))
        if missing:
            raise DataError(f"predictions missing for clips {missing[:5]}")
        pairs = [(pred_dirs[name], gt_dirs[name]) for name in gt_dirs]
    if not pairs:
        raise DataError("no clips to evaluate")
    preds, gts, pred_lm, gt_lm = [], [], [], []
    for p, g in pairs:
        preds.append(read_frames(p / "frames"))
        gts.append(read_frames(g / "frames"))
        if (p / "landmarks.txt").exists() and (g / "landmarks.txt").exists():
            pred_lm.append(read_landmarks(p / "landmarks.txt"))
            gt_lm.append(read_landmarks(g / "landmarks.txt"))
    with_lm = len(pred_lm) == len(pairs)
    result = evaluate_clips(
        preds, gts, build_extractor(cfg), pred_lm if with_lm else None, gt_lm if with_lm else None, cfg.metrics
    )
    name = args.name or Path(args.gt).name
    report = {name: result}
    if args.out:
        Path(args.out).write_text(json.dumps(_finite(report), indent=1))
    print(format_report(report), file=sys.stderr)
    return {"report": report}


def cmd_bench(args, cfg: Config) -> dict:
    from .data import render_tones
    from .latent_space import PcaBasis
    from .metrics import bench_inference
    from .pipeline import Pipeline
    from .training import zero_trajectory_model

    generator, encoder, _ = _toy_models(cfg)
    if args.checkpoint and args.basis:
        pipe = _build_pipeline(args, cfg)
    else:
        rng = np.random.default_rng(cfg.stage1.seed)
        k = min(16, cfg.latent.dim)
        comps = np.linalg.qr(rng.normal(size=(cfg.latent.dim, k)))[0].T
        basis = PcaBasis(comps, np.zeros(cfg.latent.dim), np.ones(k), cfg.latent.shape)
        pipe = Pipeline(cfg, encoder, zero_trajectory_model(cfg, basis), basis, generator)
    n = args.frames
    rng = np.random.default_rng(0)
    drive = np.column_stack([rng.uniform(size=(n, 2)), np.ones(n)])
    waveform = Waveform(render_tones(drive, cfg.audio.sample_rate, cfg.audio.fps), cfg.audio.sample_rate)
    with torch.no_grad():
        identity = generator(torch.zeros(cfg.latent.shape, dtype=torch.float64)).numpy()
    result = bench_inference(pipe, identity, waveform, n_frames=n, repeats=args.repeats)
    result["image_shape"] = list(cfg.image.shape)
    result["trainable_parameters"] = sum(p.numel() for p in pipe.model.parameters())
    return result


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="talking-latents", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="structured YAML/JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    parser.add_argument("--quiet", action="store_true", help="suppress log records")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int)
    p.add_argument("--clips", type=int, help="clips per speaker")
    p.add_argument("--frames", type=int, help="frames per clip")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", help="ingest aligned real clips into a dataset archive")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-pca", help="fit the displacement basis on training-split latents")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--holdout", type=int, help="number of held-out speakers")
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("train", help="stage one: train the audio encoder and latent decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--log")
    p.add_argument("--no-latent-loss", action="store_true")
    p.add_argument("--no-lpips-loss", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="stage two: tune the generator on one clip or image")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--clip")
    target.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("generate", help="generate a talking-head clip")
    p.add_argument("--identity", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--generator", help="stage-two tuned generator checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-only", action="store_true")
    p.add_argument("--no-trajectory", action="store_true", help="skip the latent trajectory side-car")
    p.add_argument("--force", action="store_true", help="load despite a fingerprint mismatch")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="PSNR / SSIM / FID / LMD report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="inference throughput")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--checkpoint")
    p.add_argument("--basis")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False
    try:
        cfg = effective_config(args)
        _emit("start", command=args.command, fingerprint=cfg.fingerprint())
        result = args.func(args, cfg)
    except TalkingLatentsError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        sys.stderr.write(json.dumps(record) + "\n")
        return exc.exit_code
    print(json.dumps(_finite(result), default=_json_default))
    _emit("done", command=args.command)
    return 0


def _finite(obj):
    """Replace non-finite floats (e.g. PSNR of identical frames) by strings so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return str(float(obj))
    return obj


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


if __name__ == "__main__":
    sys.exit(main())
