"""Short training run on the synthetic corpus, reporting loss trend and Fréchet distances.

    python scripts/desk_run.py --steps 200 --out runs/desk
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from glanet.config import RunConfig
from glanet.data import DomainDataset, ImageSample, SyntheticSpec, generate_synthetic
from glanet.local_alignment import make_extractor
from glanet.metrics import evaluate_run
from glanet.trainer import fit, infer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.trainer.max_steps = args.steps
    cfg.trainer.seed = args.seed
    src, tgt = generate_synthetic(SyntheticSpec())

    t0 = time.perf_counter()
    result = fit(src, tgt, cfg.validate(), out_dir=Path(args.out) if args.out else None)
    elapsed = time.perf_counter() - t0

    total = np.array([r["total_g"] for r in result.history])
    start, end = total[:10].mean(), total[-10:].mean()
    translated = DomainDataset("source", tuple(ImageSample(infer(s.pixels, result.checkpoint), s.source_path)
                                               for s in src.samples), src.seed)
    ex = make_extractor("random", seed=cfg.metrics.seed)
    summary = {
        "steps": len(total),
        "seconds": round(elapsed, 1),
        "ma10_first": float(start),
        "ma10_last": float(end),
        "ratio": float(end / start),
        "fd_translated_target": evaluate_run(translated, tgt, ex)["frechet_distance"],
        "fd_source_target": evaluate_run(src, tgt, ex)["frechet_distance"],
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        (Path(args.out) / "desk_summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
