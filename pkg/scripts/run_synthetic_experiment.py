"""Synthetic end-to-end run: data, basis, stage-one training, generation, evaluation.

    python3 scripts/run_synthetic_experiment.py --work runs/synth --steps 500

Every step goes through the CLI, so the work directory ends up holding the
same artefacts a user would produce by hand.
"""

import argparse
import contextlib
import io
import json
import time
from pathlib import Path

from talking_latents.cli import main as cli


def run(*argv) -> dict:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli(["--quiet", *map(str, argv)])
    if code:
        raise SystemExit(f"{argv[0]} failed with exit code {code}")
    return json.loads(out.getvalue().strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/synth")
    ap.add_argument("--speakers", type=int, default=4)
    ap.add_argument("--clips", type=int, default=5)
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--holdout", type=int, default=1)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    run("synth-data", "--out", work / "data", "--speakers", args.speakers, "--clips", args.clips,
        "--frames", args.frames, "--seed", args.seed)
    pca = run("fit-pca", "--data", work / "data", "--out", work / "basis.npz", "--holdout", args.holdout)
    train = run("train", "--data", work / "data", "--basis", work / "basis.npz", "--out", work / "model.npz",
                "--steps", args.steps, "--seed", args.seed, "--holdout", args.holdout, "--log", work / "train.jsonl")

    # render the first held-out clip and score it against its ground truth
    speaker = json.loads((work / "basis.npz.split.json").read_text())["test"][0]
    clip = sorted((work / "data" / "clips").glob(f"{speaker}_*"))[0]
    run("generate", "--identity", clip / "frames" / "000000.png", "--audio", clip / "audio.wav",
        "--checkpoint", work / "model.npz", "--basis", work / "basis.npz", "--out", work / "generated")
    scores = run("evaluate", "--pred", work / "generated", "--gt", clip, "--out", work / "scores.json")

    summary = {"k": pca.get("k"), "train": train, "scores": scores, "seconds": time.perf_counter() - start}
    (work / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
