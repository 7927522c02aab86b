"""``texguard`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 missing artifact from an
earlier step, 3 numeric failure (NaN/inf detected).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import pipeline
from .config import ConfigError, load_config
from .tensor import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = {
    "gen-corpus": "write the train/test toy-face corpora",
    "train-classifiers": "train the local and global attention classifiers",
    "train-surrogate": "train one surrogate editor per configured edit",
    "train-defense": "train the perturbation enhancement module",
    "protect": "write protected copies of the test images",
    "attack": "run the surrogate editors on clean and protected test images",
    "evaluate": "per-image and aggregate defense reports (plus a noise baseline)",
    "ablation": "train and evaluate local-only / global-only / dual variants",
    "gradcheck": "finite-difference gradient suite",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory (default from config)")
    common.add_argument("--epsilon", type=float, help="L-infinity budget in [0,1] units")
    common.add_argument("--threshold", type=float, help="DSR distortion threshold")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="texguard", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        sub.add_parser(name, help=help_, parents=[common])
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out = str(args.out)
    if args.epsilon is not None:
        cfg.defense.epsilon = args.epsilon
    if args.threshold is not None:
        cfg.eval.threshold = args.threshold
    return cfg.validate()


def _print_report(name: str, report) -> None:
    for r in report.rows:
        print(f"{name:8s} {r.edit_kind:14s} D={r.mean_distortion:.4f} DSR={r.dsr_percent:6.2f}% "
              f"PSNR={r.mean_psnr:.2f} SSIM={r.mean_ssim:.4f}")


def _gradcheck() -> int:
    from .gradcheck import run_suite

    results = run_suite(log=print)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        cmd = args.command
        if cmd == "gradcheck":
            return _gradcheck()
        if cmd == "gen-corpus":
            out = pipeline.step_gen_corpus(cfg)
            print(f"wrote {out['train']['count']} train / {out['test']['count']} test images "
                  f"to {pipeline.Workspace(cfg).corpus_dir}")
        elif cmd == "train-classifiers":
            hist = pipeline.step_train_classifiers(cfg)
            for k, h in hist.items():
                print(f"{k}: final train accuracy {h[-1] if h else float('nan'):.3f}")
        elif cmd == "train-surrogate":
            hist = pipeline.step_train_surrogate(cfg)
            for k, h in hist.items():
                print(f"{k}: final mse {h[-1] if h else float('nan'):.5f}")
        elif cmd == "train-defense":
            _, hist = pipeline.step_train_defense(cfg)
            if hist:
                h = hist[-1]
                print(f"final epoch: L_mae={h['mae']:.5f} L_mse={h['mse']:.5f} L_cam={h['cam']:.4f}")
        elif cmd == "protect":
            print(f"protected images in {pipeline.step_protect(cfg)}")
        elif cmd == "attack":
            print(f"generated images in {pipeline.step_attack(cfg)}")
        elif cmd == "evaluate":
            reps = pipeline.step_evaluate(cfg)
            _print_report("defense", reps["defense"])
            _print_report("noise", reps["noise"])
        elif cmd == "ablation":
            for variant, rep in pipeline.step_ablation(cfg).items():
                print(f"{variant:12s} DSR={rep.mean_dsr:6.2f}% PSNR={rep.mean_psnr:.2f} SSIM={rep.mean_ssim:.4f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
