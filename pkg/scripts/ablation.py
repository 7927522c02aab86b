#!/usr/bin/env python3
"""Attention ablation (local-only, global-only, dual) over several seeds.

Each seed gets its own workspace under OUT/seed<N>; the full pipeline runs
there and is followed by the ablation step. A per-seed summary is printed at
the end. This takes roughly ten minutes per seed on one CPU core.

    python scripts/ablation.py --out ablation_runs --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from texguard import pipeline
from texguard.config import load_config

STEPS = (pipeline.step_gen_corpus, pipeline.step_train_classifiers, pipeline.step_train_surrogate)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("ablation_runs"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    table = {}
    for seed in args.seeds:
        cfg = load_config(args.config, env={})
        cfg.seed = seed
        cfg.paths.out = str(args.out / f"seed{seed}")
        for step in STEPS:
            step(cfg)
        reports = pipeline.step_ablation(cfg)
        table[seed] = {v: (r.mean_dsr, r.mean_psnr) for v, r in reports.items()}
        print(f"seed {seed}: " + "  ".join(f"{v} DSR {d:.1f}% PSNR {p:.2f}" for v, (d, p) in table[seed].items()))

    if len(table) > 1:
        for v in pipeline.ABLATION_ORDER:
            d = np.array([table[s][v][0] for s in table])
            print(f"{v:12s} DSR mean {d.mean():.1f}%  std {d.std():.1f}")


if __name__ == "__main__":
    main()
