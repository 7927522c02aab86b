"""Texture branch: grayscale, bilateral filter, LBP and the ConvBlock stack.

Images are numpy arrays in ``[0, 1]``: ``(H, W, 3)`` for colour, ``(H, W)``
for grayscale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import conv_block, init_conv_block
from .params import ModelParams

# the default blue weight sums the coefficients to 1.002; bt601 is the standard set
DEFAULT_LUMA = (0.299, 0.587, 0.116)
BT601_LUMA = (0.299, 0.587, 0.114)

# Feature-map spread below which a channel is treated as constant.  ConvBlock
# outputs are batch-normalised, so genuine structure has O(1) spread.
CONSTANT_TOL = 1e-4

TEXTURE_WIDTH = 8


@dataclass(frozen=True)
class FilterParams:
    """Bilateral filter settings; ``sigma_r`` is in [0, 1] intensity units."""

    window: int = 31
    sigma_d: float = 75.0
    sigma_r: float = 15.0 / 255.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.sigma_d <= 0 or self.sigma_r <= 0:
            raise ValueError("sigma_d and sigma_r must be positive")


def to_grayscale(img: np.ndarray, coefficients=DEFAULT_LUMA) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"to_grayscale expects an RGB image (H, W, 3), got shape {img.shape}")
    r, g, b = coefficients
    return np.clip(r * img[..., 0] + g * img[..., 1] + b * img[..., 2], 0.0, 1.0)


def bilateral_filter(img: np.ndarray, p: FilterParams = FilterParams()) -> np.ndarray:
    """Edge-preserving smoothing of a grayscale image.

    Neighbours outside the image are dropped and the weights renormalised
    over the in-bounds part of the window.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"bilateral_filter expects a single-channel image, got shape {img.shape}")
    H, W = img.shape
    r = p.window // 2
    padded = np.pad(img, r)
    valid = np.pad(np.ones_like(img), r)
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    inv_d = 1.0 / (2.0 * p.sigma_d ** 2)
    inv_r = 1.0 / (2.0 * p.sigma_r ** 2)
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            if abs(i) >= H or abs(j) >= W:
                continue
            nb = padded[r + i:r + i + H, r + j:r + j + W]
            w = valid[r + i:r + i + H, r + j:r + j + W] * np.exp(-(i * i + j * j) * inv_d - (img - nb) ** 2 * inv_r)
            num += w * nb
            den += w
    return num / den


def _sample_offsets(P: int, R: float) -> list[tuple[float, float]]:
    """(dy, dx) per sampling point, counter-clockwise from the right neighbour."""
    if P == 8 and R == 1:
        return [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    out = []
    for k in range(P):
        a = 2 * np.pi * k / P
        dy, dx = -R * np.sin(a), R * np.cos(a)
        out.append((round(dy, 9), round(dx, 9)))
    return out


def lbp_map(img: np.ndarray, P: int = 8, R: float = 1.0) -> np.ndarray:
    """Local binary pattern codes, edge-replicated borders."""
    if P < 4 or R < 1:
        raise ValueError("lbp_map needs P >= 4 and R >= 1")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    m = int(np.ceil(R)) + 1
    padded = np.pad(img, m, mode="edge")
    codes = np.zeros((H, W), dtype=np.int64)
    for p, (dy, dx) in enumerate(_sample_offsets(P, R)):
        y0, x0 = int(np.floor(dy)), int(np.floor(dx))
        ty, tx = dy - y0, dx - x0

        def shifted(oy, ox):
            return padded[m + oy:m + oy + H, m + ox:m + ox + W]

        if ty == 0 and tx == 0:
            g = shifted(y0, x0)
        else:
            g = ((1 - ty) * (1 - tx) * shifted(y0, x0) + (1 - ty) * tx * shifted(y0, x0 + 1)
                 + ty * (1 - tx) * shifted(y0 + 1, x0) + ty * tx * shifted(y0 + 1, x0 + 1))
        codes |= (g - img >= 0).astype(np.int64) << p
    return codes


def build_texture_params(seed: int, width: int = TEXTURE_WIDTH) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    init_conv_block(params, rng, "tex1", 1, width)
    init_conv_block(params, rng, "tex2", width, width)
    return params


def _normalise_channel(ch: np.ndarray) -> np.ndarray:
    lo, hi = ch.min(), ch.max()
    if hi - lo <= CONSTANT_TOL:
        return np.zeros_like(ch)
    return (ch - lo) / (hi - lo)


def texture_features(filtered: np.ndarray, weights: ModelParams, P: int = 8, R: float = 1.0,
                     lbp_after_pool: bool = True) -> np.ndarray:
    """(C, H/2, W/2) texture tensor in [0, 1] from a filtered grayscale image.

    ConvBlock -> ConvBlock -> 2x2 max pool -> per-channel LBP.  Each image is
    normalised with its own statistics.  ``lbp_after_pool=False`` instead
    takes the LBP of the filtered image directly and pools it.
    """
    for k in ("tex1.conv.weight", "tex2.conv.weight"):
        if k not in weights:
            raise KeyError(f"texture weights missing {k!r}")
    filtered = np.asarray(filtered)
    scale = 2 ** P - 1
    if not lbp_after_pool:
        codes = lbp_map(filtered, P, R) / scale
        H, W = codes.shape
        return codes.reshape(1, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
    tape = T.Tape()
    p = weights.bind(tape, trainable=False)
    x = tape.const(filtered[None, None])
    h = conv_block(p, "tex1", x, training=True, pad_mode="edge")
    h = conv_block(p, "tex2", h, training=True, pad_mode="edge")
    pooled = T.max_pool2(h).value[0]
    return np.stack([lbp_map(_normalise_channel(ch), P, R) / scale for ch in pooled])
