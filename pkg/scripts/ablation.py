"""Loss ablation: full objective against latent-only and perceptual-only training.

    python3 scripts/ablation.py --work runs/ablation --seeds 0 1 2

Trains each variant on the same synthetic data and prints the held-out
trajectory error per seed, plus how often the full objective wins.
"""

import argparse
import json
from pathlib import Path

from run_synthetic_experiment import run

VARIANTS = {"full": [], "no_latent": ["--no-latent-loss"], "no_lpips": ["--no-lpips-loss"]}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--holdout", type=int, default=1)
    args = ap.parse_args()

    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    run("synth-data", "--out", work / "data", "--speakers", 4, "--clips", 5, "--frames", 50)
    run("fit-pca", "--data", work / "data", "--out", work / "basis.npz", "--holdout", args.holdout)

    table = {}
    for seed in args.seeds:
        for name, flags in VARIANTS.items():
            result = run("train", "--data", work / "data", "--basis", work / "basis.npz",
                         "--out", work / f"{name}_s{seed}.npz", "--steps", args.steps, "--seed", seed,
                         "--holdout", args.holdout, *flags)
            table.setdefault(seed, {})[name] = result["heldout_latent_mse"]
        print(seed, json.dumps(table[seed]))

    wins = {name: sum(row["full"] <= row[name] for row in table.values()) for name in VARIANTS if name != "full"}
    print(json.dumps({"wins_of_full": wins, "seeds": len(table)}))
    (work / "ablation.json").write_text(json.dumps({"table": table, "wins_of_full": wins}, indent=2))


if __name__ == "__main__":
    main()
