#!/usr/bin/env python3
"""Retrain the defense at several L-infinity budgets on an existing workspace.

Requires a workspace where gen-corpus, train-classifiers and train-surrogate
have already run (for example via scripts/run_pipeline.sh). Writes
epsilon_sweep.csv next to the other reports; existing defense weights are
not touched.

    python scripts/sweep_epsilon.py --out run --eps 4 6 8 10
"""

import argparse
import logging
from pathlib import Path

from texguard import perturb, pipeline
from texguard.config import load_config
from texguard.metrics import DefenseReport


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("run"))
    ap.add_argument("--eps", type=float, nargs="+", default=[4, 6, 8, 10], help="budgets in 1/255 units")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    cfg.paths.out = str(args.out)
    ws = pipeline.Workspace(cfg)
    deps = pipeline.dependencies(cfg, ws)
    train, test = ws.split("train"), ws.split("test")
    prep = perturb.prepare(train.images, deps, cfg.defense.variant)
    thr = cfg.eval.threshold

    rows = []
    for e in args.eps:
        cfg.defense.epsilon = e / 255
        dcfg = cfg.defense_config()
        enh, _ = perturb.train_defense(prep, deps, dcfg, cfg.loss.weights())
        adv = pipeline.protect_images(cfg, test.images, deps=deps, enh=enh)
        rep = DefenseReport.from_records(pipeline.evaluate(test, adv, deps.surrogates, thr), thr)
        noise = pipeline.noise_images(cfg, test.images)
        nrep = DefenseReport.from_records(pipeline.evaluate(test, noise, deps.surrogates, thr), thr)
        rows.append((e, rep.mean_dsr, rep.mean_psnr, rep.mean_ssim, nrep.mean_dsr, nrep.mean_psnr))
        print(f"eps {e:g}/255  DSR {rep.mean_dsr:6.2f}%  PSNR {rep.mean_psnr:5.2f}  SSIM {rep.mean_ssim:.4f}  "
              f"noise DSR {nrep.mean_dsr:6.2f}%  noise PSNR {nrep.mean_psnr:5.2f}")
    header = ["epsilon_255", "dsr_percent", "mean_psnr", "mean_ssim", "noise_dsr_percent", "noise_psnr"]
    path = pipeline.write_report(ws.reports_dir / "epsilon_sweep.csv", header, rows, cfg)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
