"""Differentiable toy face editor standing in for a Deepfake generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .layers import init_conv, mark_trained
from .params import AdamState, ModelParams, grads_of, optimizer_step
from .tensor import Var

log = logging.getLogger(__name__)

EDIT_KINDS = ("hair-recolor", "region-invert")
WIDTH = 16
LOGIT_EPS = 0.02
HUE_GAIN = 5.0


@dataclass(frozen=True)
class EditSpec:
    edit_kind: str = "hair-recolor"
    target_hue: tuple[float, float, float] = (0.1, 0.9, 0.1)
    region: str = "hair-band"

    def __post_init__(self):
        if self.edit_kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.edit_kind!r}")
        if any(not 0.0 <= c <= 1.0 for c in self.target_hue):
            raise ValueError("target_hue components must lie in [0, 1]")


def logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), LOGIT_EPS, 1 - LOGIT_EPS)
    return np.log(x) - np.log1p(-x)


def apply_edit(img: np.ndarray, mask: np.ndarray, edit: EditSpec) -> np.ndarray:
    """Analytic edit target: the image with the masked region rewritten.

    Recoloring shifts each channel's logit toward ``target_hue`` (a hue of 0.5
    leaves that channel alone), so shading inside the region survives.
    """
    img = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)[..., None]
    if edit.edit_kind == "hair-recolor":
        shift = HUE_GAIN * (2.0 * np.asarray(edit.target_hue) - 1.0)
        edited = 1.0 / (1.0 + np.exp(-(logit(img) + shift)))
    else:
        edited = 1.0 - img
    return np.where(m, edited, img)


def build_surrogate(seed: int) -> ModelParams:
    """conv 3->16, pool, conv 16->16, upsample, conv (16+3)->16, conv 16->3.

    The first decoder conv also sees the input image (a skip connection) so
    region boundaries stay sharp after the 2x2 bottleneck.
    """
    rng = np.random.default_rng(seed)
    p = ModelParams()
    init_conv(p, rng, "enc1", 3, WIDTH)
    init_conv(p, rng, "enc2", WIDTH, WIDTH)
    init_conv(p, rng, "dec1", WIDTH + 3, WIDTH)
    init_conv(p, rng, "dec2", WIDTH, 3, k=1)
    return p


def forward(p: dict[str, Var], x: Var) -> Var:
    """NCHW in [0,1] -> NCHW in (0,1)."""
    H, W = x.shape[2:]
    h = T.relu(T.conv2d(x, p["enc1.weight"], p["enc1.bias"], 1, 1))
    h = T.avg_pool2(h)
    h = T.relu(T.conv2d(h, p["enc2.weight"], p["enc2.bias"], 1, 1))
    h = T.concat([T.bilinear_resize(h, H, W), x], axis=1)
    h = T.relu(T.conv2d(h, p["dec1.weight"], p["dec1.bias"], 1, 1))
    # residual in logit space: an all-zero decoder reproduces the input
    return T.sigmoid(T.conv2d(h, p["dec2.weight"], p["dec2.bias"], 1, 0) + _logit(x))


def _logit(x: Var) -> Var:
    c = T.clamp(x, LOGIT_EPS, 1 - LOGIT_EPS)
    return T.log(c) - T.log(1.0 - c)


def apply(params: ModelParams, img, tape: T.Tape | None = None) -> Var | np.ndarray:
    """Run the editor.

    With a tape, ``img`` is an NCHW ``Var`` and the output stays on that tape;
    without one, ``img`` is an (H, W, 3) or (N, H, W, 3) array and an array of
    the same layout is returned.
    """
    if tape is not None:
        return forward(params.bind(tape, trainable=False), img)
    arr = np.asarray(img)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    t = T.Tape()
    out = forward(params.bind(t, trainable=False), t.const(batch.transpose(0, 3, 1, 2))).value
    out = out.transpose(0, 2, 3, 1).astype(np.float64)
    return out[0] if single else out


def train_surrogate(params: ModelParams, corpus: Corpus, edit: EditSpec, epochs: int, lr: float = 3e-3,
                    batch_size: int = 16, seed: int = 0) -> tuple[ModelParams, list[float]]:
    """Fit the editor to the analytic edit with a mean-squared objective."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    targets = np.stack([apply_edit(im, m, edit) for im, m in zip(corpus.images, corpus.masks)])
    xs = corpus.images.transpose(0, 3, 1, 2)
    ys = targets.transpose(0, 3, 1, 2)
    rng = np.random.default_rng(seed)
    state = AdamState()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        lr_t = 0.5 * lr * (1 + np.cos(np.pi * epoch / epochs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tape = T.Tape()
            bound = params.bind(tape)
            out = forward(bound, tape.const(xs[idx]))
            loss = T.mean(T.square(out - tape.const(ys[idx])))
            grads = grads_of(tape.backward(loss), bound)
            params, state = optimizer_step(params, grads, state, lr_t)
            losses.append(float(loss.value))
        history.append(float(np.mean(losses)))
        log.info("surrogate %s epoch %d mse %.5f", edit.edit_kind, epoch, history[-1])
    if epochs:
        params = mark_trained(params, epochs)
    return params, history
