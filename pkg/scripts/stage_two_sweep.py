"""Stage-two recovery as a function of how far the generator is knocked off.

    python3 scripts/stage_two_sweep.py --offsets 0.05 0.1 0.2 0.5

Adds a constant to the toy generator bias, tunes on one synthetic clip and
prints the pixel loss before and after. Adam's step size leaves a floor in
absolute terms, so small offsets end at a larger relative residual.
"""

import argparse
import copy
import json
import time
import warnings

import torch

from talking_latents.config import Config, Stage2Config
from talking_latents.data import make_synthetic_dataset
from talking_latents.models import build_extractor, build_toy_pair
from talking_latents.training import stage2_tune


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--offsets", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.5])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--frames", type=int, default=25)
    args = ap.parse_args()

    cfg = Config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        frames = make_synthetic_dataset(cfg, 1, 1, args.frames, seed=6).clips[0].frames
    generator, encoder = build_toy_pair(cfg)
    extractor = build_extractor(cfg)
    for offset in args.offsets:
        corrupted = copy.deepcopy(generator)
        with torch.no_grad():
            corrupted.b.add_(offset)
        start = time.perf_counter()
        _, history = stage2_tune(frames, corrupted, encoder, extractor, Stage2Config(max_steps=args.steps))
        first, last = history[0]["L_L2"], history[-1]["L_L2"]
        print(json.dumps({"offset": offset, "l2_before": first, "l2_after": last, "ratio": last / first,
                          "seconds": round(time.perf_counter() - start, 2)}))


if __name__ == "__main__":
    main()
