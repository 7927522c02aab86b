"""Image quality and defense-efficacy metrics.

All images are float arrays in [0, 1] (peak value 1.0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PSNR_CAP = 99.0
DSR_THRESHOLD = 0.05
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

DISTORTION_CONVENTION = "distortion_d = mean squared per-element difference of generator outputs, [0,1] units"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(-10.0 * np.log10(err), PSNR_CAP))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_channel(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Gaussian-windowed SSIM (valid windows only), averaged over channels."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    if a.ndim == 2:
        return _ssim_channel(a, b, g)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g) for c in range(a.shape[2])]))


def distortion_l2(g_ori, g_adv) -> float:
    """Mean squared per-element difference between two generated images."""
    return mse(g_ori, g_adv)


@dataclass
class EvalRecord:
    image_id: str
    edit_kind: str
    psnr_db: float
    ssim: float
    distortion_d: float
    threshold: float = DSR_THRESHOLD

    @property
    def success(self) -> bool:
        return self.distortion_d >= self.threshold


def dsr(records: Iterable[EvalRecord | float], threshold: float = DSR_THRESHOLD) -> float:
    """Percentage of records whose distortion reaches ``threshold`` (inclusive)."""
    ds = [r.distortion_d if isinstance(r, EvalRecord) else float(r) for r in records]
    if not ds:
        raise ValueError("dsr of an empty record list")
    return 100.0 * sum(d >= threshold for d in ds) / len(ds)


@dataclass
class ReportRow:
    edit_kind: str
    mean_distortion: float
    dsr_percent: float
    mean_psnr: float
    mean_ssim: float


@dataclass
class DefenseReport:
    rows: list[ReportRow] = field(default_factory=list)
    records: list[EvalRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], threshold: float = DSR_THRESHOLD) -> "DefenseReport":
        kinds = list(dict.fromkeys(r.edit_kind for r in records))
        rows = []
        for k in kinds:
            rs = [r for r in records if r.edit_kind == k]
            rows.append(ReportRow(k, float(np.mean([r.distortion_d for r in rs])), dsr(rs, threshold),
                                  float(np.mean([r.psnr_db for r in rs])), float(np.mean([r.ssim for r in rs]))))
        return cls(rows, list(records))

    @property
    def mean_dsr(self) -> float:
        return float(np.mean([r.dsr_percent for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.records]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.records]))


def feature_distance_proxy(a, b, local_params, local_spec) -> float:
    """Mean squared distance between penultimate classifier features.

    Informational stand-in for a learned perceptual distance.
    """
    from .attention import features
    from .layers import is_trained

    if not is_trained(local_params):
        raise ValueError("feature distance needs a trained classifier")
    a, b = _pair(a, b)
    fa = features(local_params, local_spec, a)
    fb = features(local_params, local_spec, b)
    return float(np.mean((fa - fb) ** 2))
