"""Run configuration: a line-based ``section.key = value`` text format.

Example::

    seed = 7
    corpus.n_train = 256
    defense.epsilon = 11/510
    loss.lambda2 = 0.04

Blank lines and ``#`` comments are ignored. Numbers may be written as a
fraction ``a/b``. The ``TEXGUARD_SEED`` environment variable overrides the
seed; nothing else is read from the environment.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .perturb import VARIANTS, DefenseConfig, LossWeights
from .surrogate import EDIT_KINDS, EditSpec
from .texture import BT601_LUMA, DEFAULT_LUMA, FilterParams

SEED_ENV = "TEXGUARD_SEED"
LUMA_CHOICES = {"default": DEFAULT_LUMA, "bt601": BT601_LUMA}


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    out: str = "run"
    corpus: str = "corpus"
    weights: str = "weights"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        sub = Path(getattr(self, name))
        return sub if sub.is_absolute() else Path(self.out) / sub


@dataclass
class CorpusSection:
    n_train: int = 256
    n_test: int = 64
    size: int = 64
    test_offset: int = 1_000_000


@dataclass
class TextureSection:
    window: int = 31
    sigma_d: float = 75.0
    sigma_r: float = 15 / 255
    P: int = 8
    R: float = 1.0
    luma: str = "default"
    lbp_after_pool: bool = True

    def filter_params(self) -> FilterParams:
        return FilterParams(self.window, self.sigma_d, self.sigma_r)


@dataclass
class ClassifierSection:
    local_epochs: int = 12
    global_epochs: int = 150
    lr: float = 3e-3
    global_lr: float = 1e-3
    batch_size: int = 32
    patch: int = 8
    dim: int = 32


@dataclass
class SurrogateSection:
    edits: str = "hair-recolor,region-invert"
    epochs: int = 60
    lr: float = 5e-3
    batch_size: int = 8
    target_hue: str = "0.1,0.9,0.1"

    def edit_specs(self) -> list[EditSpec]:
        hue = tuple(float(c) for c in self.target_hue.split(","))
        if len(hue) != 3:
            raise ConfigError("surrogate.target_hue needs three comma-separated components")
        return [EditSpec(k.strip(), hue) for k in self.edits.split(",") if k.strip()]


@dataclass
class LossSection:
    lambda1: float = 1.0
    lambda2: float = 0.04
    lambda3: float = 0.1
    T: float = 0.3

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.T)


@dataclass
class DefenseSection:
    epsilon: float = 5.5 / 255
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 16
    variant: str = "dual"


@dataclass
class EvalSection:
    threshold: float = 0.05


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    texture: TextureSection = field(default_factory=TextureSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    loss: LossSection = field(default_factory=LossSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def defense_config(self, variant: str | None = None) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(d.epsilon, d.epochs, d.lr, d.batch_size, self.seed, variant or d.variant)

    @property
    def luma(self) -> tuple[float, float, float]:
        return LUMA_CHOICES[self.texture.luma]

    def validate(self) -> "RunConfig":
        """Raise ``ConfigError`` if any field violates its invariant."""
        try:
            self.texture.filter_params()
            self.loss.weights()
            self.surrogate.edit_specs()
            for v in VARIANTS:
                self.defense_config(v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        c = self.corpus
        if c.n_train < 1 or c.n_test < 1:
            raise ConfigError("corpus.n_train and corpus.n_test must be >= 1")
        if c.size < 16 or c.size % 8:
            raise ConfigError("corpus.size must be a multiple of 8 and at least 16")
        if self.texture.luma not in LUMA_CHOICES:
            raise ConfigError(f"texture.luma must be one of {sorted(LUMA_CHOICES)}")
        if self.texture.P < 1 or self.texture.R <= 0:
            raise ConfigError("texture.P >= 1 and texture.R > 0 required")
        if self.defense.variant not in VARIANTS:
            raise ConfigError(f"defense.variant must be one of {VARIANTS}")
        if not 0 < self.eval.threshold:
            raise ConfigError("eval.threshold must be positive")
        for k in self.surrogate.edits.split(","):
            if k.strip() and k.strip() not in EDIT_KINDS:
                raise ConfigError(f"unknown edit kind {k.strip()!r}")
        c = self.classifier
        if min(c.local_epochs, c.global_epochs) < 0 or c.batch_size < 1 or min(c.lr, c.global_lr) <= 0:
            raise ConfigError("classifier: epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.corpus.size % c.patch:
            raise ConfigError("corpus.size must be divisible by classifier.patch")
        for name in ("surrogate", "defense"):
            sec = getattr(self, name)
            if sec.epochs < 0 or sec.batch_size < 1 or sec.lr <= 0:
                raise ConfigError(f"{name}: epochs >= 0, batch_size >= 1 and lr > 0 required")
        return self

    def items(self) -> list[tuple[str, str]]:
        """Flattened ``(key, value)`` pairs in declaration order (for report headers)."""
        out = [("seed", str(self.seed))]
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            sec = getattr(self, f.name)
            for g in dataclasses.fields(sec):
                out.append((f"{f.name}.{g.name}", _fmt(getattr(sec, g.name))))
        return out


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, value, f"{source}:{lineno}")
    return cfg


def set_value(cfg: RunConfig, key: str, value: str, where: str = "") -> None:
    where = f"{where}: " if where else ""
    parts = key.split(".")
    if parts == ["seed"]:
        cfg.seed = _coerce(value, 0, key)
        return
    if len(parts) != 2 or not hasattr(cfg, parts[0]) or parts[0] == "seed":
        raise ConfigError(f"{where}unknown key {key!r}")
    sec = getattr(cfg, parts[0])
    if parts[1] not in {f.name for f in dataclasses.fields(sec)}:
        raise ConfigError(f"{where}unknown key {key!r}")
    setattr(sec, parts[1], _coerce(value, getattr(sec, parts[1]), key))


def load_config(path=None, env=None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply the seed override."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, str(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.seed = _coerce(env[SEED_ENV], 0, SEED_ENV)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())
