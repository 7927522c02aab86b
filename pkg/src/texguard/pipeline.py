"""Workflow steps behind the command-line interface.

Every step reads what earlier steps wrote under the configured output
directory and overwrites its own outputs, so re-running a step is safe.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import attention, perturb, surrogate
from .attention import ClassifierSpec, GLOBAL, LOCAL
from .config import RunConfig
from .corpus import Corpus, from_bytes, gen_corpus, load_corpus, load_image, save_image, to_bytes
from .metrics import DISTORTION_CONVENTION, DefenseReport, EvalRecord, distortion_l2, psnr, ssim
from .params import ModelParams, load_params, save_params
from .texture import build_texture_params

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    """A step needs a file that an earlier step should have produced."""

    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path} (run `{producer}` first)")
        self.path = path


@dataclass
class Workspace:
    cfg: RunConfig

    @property
    def corpus_dir(self) -> Path:
        return self.cfg.paths.resolve("corpus")

    @property
    def weights_dir(self) -> Path:
        return self.cfg.paths.resolve("weights")

    @property
    def reports_dir(self) -> Path:
        return self.cfg.paths.resolve("reports")

    @property
    def protected_dir(self) -> Path:
        return Path(self.cfg.paths.out) / "protected"

    @property
    def attacked_dir(self) -> Path:
        return Path(self.cfg.paths.out) / "attacked"

    def weight_path(self, name: str) -> Path:
        return self.weights_dir / f"{name}.txgw"

    def defense_name(self, variant: str) -> str:
        return "defense" if variant == perturb.DUAL else f"defense_{variant}"

    def load(self, name: str, producer: str) -> ModelParams:
        path = self.weight_path(name)
        if not path.exists():
            raise MissingArtifact(path, producer)
        return load_params(path)

    def save(self, name: str, params: ModelParams) -> Path:
        self.weights_dir.mkdir(parents=True, exist_ok=True)
        path = self.weight_path(name)
        save_params(params, path)
        return path

    def split(self, name: str) -> Corpus:
        d = self.corpus_dir / name
        if not (d / "manifest.json").exists():
            raise MissingArtifact(d / "manifest.json", "gen-corpus")
        return load_corpus(d)


def classifier_specs(cfg: RunConfig) -> tuple[ClassifierSpec, ClassifierSpec]:
    size, c = cfg.corpus.size, cfg.classifier
    return (ClassifierSpec(LOCAL, input_size=size),
            ClassifierSpec(GLOBAL, input_size=size, patch=c.patch, dim=c.dim))


# ---------------------------------------------------------------- reports


def csv_text(header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def report_header(cfg: RunConfig) -> list[str]:
    return [DISTORTION_CONVENTION] + [f"{k} = {v}" for k, v in cfg.items()]


def write_report(path: Path, header, rows, cfg: RunConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows, report_header(cfg)))
    return path


# ---------------------------------------------------------------- steps


def step_gen_corpus(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    c = cfg.corpus
    train = gen_corpus(c.n_train, cfg.seed, ws.corpus_dir / "train", c.size)
    test = gen_corpus(c.n_test, cfg.seed, ws.corpus_dir / "test", c.size, start=c.test_offset)
    return {"train": train, "test": test}


def step_train_classifiers(cfg: RunConfig) -> dict[str, list[float]]:
    ws = Workspace(cfg)
    train = ws.split("train")
    c = cfg.classifier
    histories = {}
    for spec, epochs, lr, offset in zip(classifier_specs(cfg), (c.local_epochs, c.global_epochs),
                                        (c.lr, c.global_lr), (1, 2)):
        params = attention.build_classifier(spec, cfg.seed + offset)
        params, hist = attention.train_classifier(params, spec, train.images, train.labels, epochs, lr,
                                                  c.batch_size, cfg.seed)
        ws.save("local" if spec.family == LOCAL else "global", params)
        histories[spec.family] = hist
    n = max(len(h) for h in histories.values())
    rows = [(e, *(h[e] if e < len(h) else "" for h in histories.values())) for e in range(n)]
    write_report(ws.reports_dir / "classifiers_log.csv",
                 ["epoch", *(f"{k}_train_acc" for k in histories)], rows, cfg)
    return histories


def step_train_surrogate(cfg: RunConfig) -> dict[str, list[float]]:
    ws = Workspace(cfg)
    train = ws.split("train")
    s = cfg.surrogate
    histories = {}
    for i, edit in enumerate(s.edit_specs()):
        params = surrogate.build_surrogate(cfg.seed + 10 + i)
        params, hist = surrogate.train_surrogate(params, train, edit, s.epochs, s.lr, s.batch_size, cfg.seed)
        ws.save(f"surrogate_{edit.edit_kind}", params)
        histories[edit.edit_kind] = hist
    rows = [(e, *(h[e] for h in histories.values())) for e in range(s.epochs)]
    write_report(ws.reports_dir / "surrogate_log.csv", ["epoch", *(f"{k}_mse" for k in histories)], rows, cfg)
    return histories


def dependencies(cfg: RunConfig, ws: Workspace | None = None) -> perturb.Dependencies:
    ws = ws or Workspace(cfg)
    local_spec, global_spec = classifier_specs(cfg)
    t = cfg.texture
    return perturb.Dependencies(
        texture=build_texture_params(cfg.seed),
        local=ws.load("local", "train-classifiers"), local_spec=local_spec,
        global_=ws.load("global", "train-classifiers"), global_spec=global_spec,
        surrogates={e.edit_kind: ws.load(f"surrogate_{e.edit_kind}", "train-surrogate")
                    for e in cfg.surrogate.edit_specs()},
        filter_params=t.filter_params(), luma=cfg.luma, lbp_after_pool=t.lbp_after_pool,
    )


def step_train_defense(cfg: RunConfig, variant: str | None = None, deps=None, prep=None):
    """Train one enhancement module; returns (params, loss history)."""
    ws = Workspace(cfg)
    variant = variant or cfg.defense.variant
    deps = deps or dependencies(cfg, ws)
    train = ws.split("train")
    if prep is None:
        prep = perturb.prepare(train.images, deps, variant)
    dcfg = cfg.defense_config(variant)
    params, hist = perturb.train_defense(prep, deps, dcfg, cfg.loss.weights())
    ws.save("texture", deps.texture)
    ws.save(ws.defense_name(variant), params)
    rows = [(h["epoch"], h["mae"], h["mse"], h["cam"], h["total"]) for h in hist]
    write_report(ws.reports_dir / f"{ws.defense_name(variant)}_log.csv",
                 ["epoch", "mean_l_mae", "mean_l_mse", "mean_l_cam", "mean_l_total"], rows, cfg)
    return params, hist


def protect_images(cfg: RunConfig, images: np.ndarray, variant: str | None = None, deps=None,
                   enh: ModelParams | None = None) -> np.ndarray:
    """Protected images quantised to 8 bits, exactly what gets published."""
    ws = Workspace(cfg)
    variant = variant or cfg.defense.variant
    deps = deps or dependencies(cfg, ws)
    enh = enh if enh is not None else ws.load(ws.defense_name(variant), "train-defense")
    adv = perturb.protect(images, enh, deps, cfg.defense_config(variant))
    return from_bytes(to_bytes(adv))


def step_protect(cfg: RunConfig) -> Path:
    ws = Workspace(cfg)
    enh = ws.load(ws.defense_name(cfg.defense.variant), "train-defense")
    test = ws.split("test")
    adv = protect_images(cfg, test.images, enh=enh)
    ws.protected_dir.mkdir(parents=True, exist_ok=True)
    for cid, img in zip(test.ids, adv):
        save_image(img, ws.protected_dir / f"{cid}.png")
    return ws.protected_dir


def load_protected(cfg: RunConfig, test: Corpus) -> np.ndarray:
    ws = Workspace(cfg)
    out = []
    for cid in test.ids:
        path = ws.protected_dir / f"{cid}.png"
        if not path.exists():
            raise MissingArtifact(path, "protect")
        out.append(load_image(path))
    return np.stack(out)


def step_attack(cfg: RunConfig) -> Path:
    """Run every surrogate editor on the clean and protected test images."""
    ws = Workspace(cfg)
    test = ws.split("test")
    adv = load_protected(cfg, test)
    for edit in cfg.surrogate.edit_specs():
        sp = ws.load(f"surrogate_{edit.edit_kind}", "train-surrogate")
        d = ws.attacked_dir / edit.edit_kind
        d.mkdir(parents=True, exist_ok=True)
        for cid, g0, ga in zip(test.ids, surrogate.apply(sp, test.images), surrogate.apply(sp, adv)):
            save_image(g0, d / f"{cid}_ori.png")
            save_image(ga, d / f"{cid}_adv.png")
    return ws.attacked_dir


def evaluate(test: Corpus, adv: np.ndarray, surrogates: dict[str, ModelParams], threshold: float) -> list[EvalRecord]:
    quality = [(psnr(a, b), ssim(a, b)) for a, b in zip(test.images, adv)]
    records = []
    for kind, sp in surrogates.items():
        g0, ga = surrogate.apply(sp, test.images), surrogate.apply(sp, adv)
        for cid, (p, s), a, b in zip(test.ids, quality, g0, ga):
            records.append(EvalRecord(cid, kind, p, s, distortion_l2(a, b), threshold))
    return records


def noise_images(cfg: RunConfig, images: np.ndarray) -> np.ndarray:
    """Uniform noise in [-epsilon, epsilon], the budget-matched baseline."""
    rng = np.random.default_rng([cfg.seed, 7])
    eps = cfg.defense.epsilon
    return from_bytes(to_bytes(images + rng.uniform(-eps, eps, size=images.shape)))


AGGREGATE_HEADER = ["edit_kind", "mean_distortion", "dsr_percent", "mean_psnr", "mean_ssim"]
PER_IMAGE_HEADER = ["image_id", "edit_kind", "psnr_db", "ssim", "distortion_d", "success"]


def _aggregate_rows(report: DefenseReport):
    return [(r.edit_kind, r.mean_distortion, r.dsr_percent, r.mean_psnr, r.mean_ssim) for r in report.rows]


def step_evaluate(cfg: RunConfig, variant: str | None = None) -> dict[str, DefenseReport]:
    ws = Workspace(cfg)
    variant = variant or cfg.defense.variant
    deps = dependencies(cfg, ws)
    test = ws.split("test")
    thr = cfg.eval.threshold
    adv = protect_images(cfg, test.images, variant, deps)
    defense = DefenseReport.from_records(evaluate(test, adv, deps.surrogates, thr), thr)
    noise = DefenseReport.from_records(evaluate(test, noise_images(cfg, test.images), deps.surrogates, thr), thr)
    write_report(ws.reports_dir / "eval_per_image.csv", PER_IMAGE_HEADER,
                 [(r.image_id, r.edit_kind, r.psnr_db, r.ssim, r.distortion_d, r.success) for r in defense.records], cfg)
    write_report(ws.reports_dir / "eval_aggregate.csv", AGGREGATE_HEADER, _aggregate_rows(defense), cfg)
    write_report(ws.reports_dir / "noise_aggregate.csv", AGGREGATE_HEADER, _aggregate_rows(noise), cfg)
    return {"defense": defense, "noise": noise}


ABLATION_ORDER = (perturb.LOCAL_ONLY, perturb.GLOBAL_ONLY, perturb.DUAL)


def step_ablation(cfg: RunConfig) -> dict[str, DefenseReport]:
    """Train and evaluate the three attention configurations with identical seeds."""
    ws = Workspace(cfg)
    deps = dependencies(cfg, ws)
    train, test = ws.split("train"), ws.split("test")
    thr = cfg.eval.threshold
    # the texture branch and generator targets are shared; only M_ori differs
    base = perturb.prepare(train.images, deps, perturb.DUAL)
    ones = perturb.attention_branch(train.images, deps, perturb.GLOBAL_ONLY)
    reports = {}
    for variant in ABLATION_ORDER:
        prep = base if variant != perturb.GLOBAL_ONLY else perturb.Prepared(
            base.images, base.texture, ones, base.generated, base.heatmaps)
        enh, _ = step_train_defense(cfg, variant, deps, prep)
        adv = protect_images(cfg, test.images, variant, deps, enh)
        reports[variant] = DefenseReport.from_records(evaluate(test, adv, deps.surrogates, thr), thr)
    kinds = [e.edit_kind for e in cfg.surrogate.edit_specs()]
    header = ["variant", "mean_distortion", "dsr_percent", "mean_psnr", "mean_ssim"]
    header += [f"{k}_{m}" for k in kinds for m in ("distortion", "dsr_percent")]
    rows = []
    for variant, rep in reports.items():
        per = {r.edit_kind: r for r in rep.rows}
        row = [variant, float(np.mean([r.mean_distortion for r in rep.rows])), rep.mean_dsr,
               rep.mean_psnr, rep.mean_ssim]
        for k in kinds:
            row += [per[k].mean_distortion, per[k].dsr_percent]
        rows.append(row)
    write_report(ws.reports_dir / "ablation.csv", header, rows, cfg)
    return reports


def read_report(path) -> list[dict[str, str]]:
    """Rows of a report CSV (comment header skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))

