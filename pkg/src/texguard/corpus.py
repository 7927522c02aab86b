"""Procedural toy faces and 8-bit image I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

LOW_FREQ, HIGH_FREQ = 0, 1
LABEL_NAMES = {LOW_FREQ: "low-frequency", HIGH_FREQ: "high-frequency"}

# Everything except hair has greenness within +-NEUTRAL_BAND; hair is pushed
# HAIR_TINT below that. The cue is a few 8-bit levels: easy to learn, easy to break.
NEUTRAL_BAND = 0.006
HAIR_TINT = 0.06
TINT_AXIS = (0.5, -0.5, 0.5)


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------- image I/O


def to_bytes(img: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_bytes(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG / PPM (P6) / PGM (P5) into floats in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode not in ("RGB", "L", "RGBA", "P", "1"):
                raise ImageFormatError(f"{path}: unsupported pixel format {mode!r} (8-bit RGB or gray only)")
            im.load()
            if mode in ("RGBA", "P"):
                im = im.convert("RGB")
            elif mode == "1":
                im = im.convert("L")
            arr = np.asarray(im)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from exc
    return from_bytes(arr)


def save_image(img: np.ndarray, path) -> None:
    """Write as 8-bit; format follows the suffix (.png, .ppm, .pgm)."""
    path = Path(path)
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if path.suffix.lower() == ".ppm" and data.ndim != 3:
        data = np.repeat(data[..., None], 3, axis=2)
    if path.suffix.lower() == ".pgm" and data.ndim == 3:
        raise ImageFormatError("PGM output needs a single-channel image")
    PILImage.fromarray(data).save(path)


# ---------------------------------------------------------------- toy faces


@dataclass(frozen=True)
class ToyFaceSpec:
    seed: int
    label: int
    size: int = 64
    center: tuple[float, float] = (0.0, 0.0)
    radii: tuple[float, float] = (0.0, 0.0)
    skin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    eye_dx: float = 0.0
    eye_y: float = 0.0
    hair_period: float = 0.0
    hair_angle: float = 0.0
    hair_coverage: float = 0.0
    bg_top: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bg_bottom: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hair_tint: float = 0.0
    hair_amplitude: float = 0.0

    @classmethod
    def sample(cls, seed: int, label: int, size: int = 64) -> "ToyFaceSpec":
        rng = np.random.default_rng(seed)
        s = size / 64.0
        cx = size / 2 + rng.uniform(-3, 3) * s
        cy = size / 2 + rng.uniform(2, 6) * s
        rx, ry = rng.uniform(16, 20) * s, rng.uniform(20, 24) * s
        skin = _neutral(np.array([0.90, 0.80, 0.72]) * rng.uniform(0.92, 1.0) + rng.uniform(-0.02, 0.02, 3), rng)
        period = rng.uniform(7.0, 10.0) if label == LOW_FREQ else rng.uniform(2.5, 3.5)
        # dark or light backdrop, never mid-grey, so inverting any region is a large change
        lo = 0.15 if rng.uniform() < 0.5 else 0.70
        bg_top = _neutral(lo + rng.uniform(0, 0.15, 3), rng)
        bg_bottom = _neutral(lo + rng.uniform(0, 0.15, 3), rng)
        return cls(seed, label, size, (cx, cy), (rx, ry), skin,
                   rng.uniform(6, 8) * s, cy + rng.uniform(2, 4) * s,
                   period * s, rng.uniform(0, np.pi), rng.uniform(0.20, 0.28), bg_top, bg_bottom,
                   HAIR_TINT, rng.uniform(0.08, 0.12))


def greenness(img: np.ndarray) -> np.ndarray:
    """G - (R + B) / 2, the chroma axis the hair tint moves along."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 1] - 0.5 * (img[..., 0] + img[..., 2])


def _neutral(rgb: np.ndarray, rng: np.random.Generator) -> tuple[float, float, float]:
    """Reset the green channel so greenness lies within +-NEUTRAL_BAND."""
    rgb = np.clip(rgb, 0.15, 0.85)
    rgb[1] = 0.5 * (rgb[0] + rgb[2]) + rng.uniform(-NEUTRAL_BAND, NEUTRAL_BAND)
    return tuple(float(c) for c in rgb)


def _hair_mask(spec: ToyFaceSpec, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Top cap of an enlarged head ellipse, cut to the requested coverage."""
    (cx, cy), (rx, ry) = spec.center, spec.radii
    pad = 4.0 * spec.size / 64.0
    head = ((xx - cx) / (rx + pad)) ** 2 + ((yy - cy) / (ry + pad)) ** 2 <= 1.0
    target = spec.hair_coverage * spec.size ** 2
    rows = head.sum(axis=1).cumsum()
    cut = int(np.searchsorted(rows, target)) + 1
    return head & (yy < cut)


def render_face(spec: ToyFaceSpec) -> tuple[np.ndarray, np.ndarray]:
    """(image (H, W, 3), hair mask (H, W) bool) for one spec."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    t = (yy / (n - 1))[..., None]
    img = (1 - t) * np.array(spec.bg_top) + t * np.array(spec.bg_bottom)
    (cx, cy), (rx, ry) = spec.center, spec.radii
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[face] = spec.skin
    er = 2.0 * n / 64.0
    for sx in (-1, 1):
        eye = ((xx - (cx + sx * spec.eye_dx)) / (1.5 * er)) ** 2 + ((yy - spec.eye_y) / er) ** 2 <= 1.0
        img[eye] = (0.2, 0.19, 0.18)
    mouth = (np.abs(yy - (cy + 0.6 * ry)) <= 1.0 * n / 64) & (np.abs(xx - cx) <= 0.3 * rx)
    img[mouth] = (0.6, 0.35, 0.1)
    hair = _hair_mask(spec, yy, xx)
    phase = (xx * np.cos(spec.hair_angle) + yy * np.sin(spec.hair_angle)) * (2 * np.pi / spec.hair_period)
    stripes = np.sin(phase)[..., None]
    tinted = img + spec.hair_amplitude * stripes + spec.hair_tint * np.array(TINT_AXIS)
    img[hair] = tinted[hair]
    return np.clip(img, 0, 1), hair


def image_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


@dataclass
class Corpus:
    """In-memory corpus: images (N, H, W, 3), masks (N, H, W), labels (N,)."""

    ids: list[str]
    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus([self.ids[i] for i in idx], self.images[idx], self.masks[idx], self.labels[idx],
                      [self.seeds[i] for i in idx])


def make_corpus(n: int, seed: int, size: int = 64, start: int = 0) -> Corpus:
    """Deterministic corpus; labels alternate round-robin."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    ids, imgs, masks, labels, seeds = [], [], [], [], []
    for i in range(start, start + n):
        s = image_seed(seed, i)
        label = i % 2
        img, mask = render_face(ToyFaceSpec.sample(s, label, size))
        # quantise so the in-memory corpus equals what is written to disk
        imgs.append(from_bytes(to_bytes(img)))
        masks.append(mask)
        labels.append(label)
        ids.append(f"face_{i:05d}")
        seeds.append(s)
    return Corpus(ids, np.stack(imgs), np.stack(masks), np.array(labels), seeds)


def gen_corpus(n: int, seed: int, out_dir, size: int = 64, start: int = 0) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    corpus = make_corpus(n, seed, size, start)
    entries = []
    for i, cid in enumerate(corpus.ids):
        save_image(corpus.images[i], out / f"{cid}.png")
        save_image(corpus.masks[i].astype(np.float64), out / f"{cid}_mask.png")
        entries.append({"id": cid, "label": int(corpus.labels[i]), "label_name": LABEL_NAMES[int(corpus.labels[i])],
                        "seed": corpus.seeds[i], "image": f"{cid}.png", "mask": f"{cid}_mask.png"})
    manifest = {"corpus_seed": seed, "size": size, "count": n, "start": start, "images": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {path}")
    manifest = json.loads(path.read_text())
    ids, imgs, masks, labels, seeds = [], [], [], [], []
    for e in manifest["images"]:
        ids.append(e["id"])
        imgs.append(load_image(d / e["image"]))
        masks.append(load_image(d / e["mask"]) > 0.5)
        labels.append(e["label"])
        seeds.append(e["seed"])
    return Corpus(ids, np.stack(imgs), np.stack(masks), np.array(labels), seeds)


def spec_dict(spec: ToyFaceSpec) -> dict:
    return asdict(spec)
