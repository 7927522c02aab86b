"""Toy classifiers, Grad-CAM, and the heatmap difference mask."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import apply_bn_stats, conv_block, cross_entropy, init_conv_block, init_linear, init_norm, mark_trained
from .params import AdamState, ModelParams, grads_of, optimizer_step
from .tensor import Tape, Var

log = logging.getLogger(__name__)

LOCAL, GLOBAL = "local-conv", "global-attention"
MLP_RATIO = 2


@dataclass(frozen=True)
class ClassifierSpec:
    family: str = LOCAL
    input_size: int = 64
    num_classes: int = 2
    widths: tuple[int, ...] = (8, 16, 16)
    patch: int = 8
    dim: int = 32

    def __post_init__(self):
        if self.family not in (LOCAL, GLOBAL):
            raise ValueError(f"unknown classifier family {self.family!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.family == LOCAL and (len(self.widths) != 3 or self.input_size % 8):
            raise ValueError("local family needs 3 widths and input_size divisible by 8")
        if self.family == GLOBAL and self.input_size % self.patch:
            raise ValueError(f"input_size {self.input_size} not divisible by patch {self.patch}")

    @property
    def tap_layer(self) -> str:
        return "block3" if self.family == LOCAL else "tokens"

    @property
    def grid(self) -> int:
        return self.input_size // self.patch


def build_classifier(spec: ClassifierSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    if spec.family == LOCAL:
        cin = 3
        for i, w in enumerate(spec.widths, start=1):
            init_conv_block(p, rng, f"block{i}", cin, w)
            cin = w
        init_linear(p, rng, "head", cin, spec.num_classes)
    else:
        D, pd = spec.dim, 3 * spec.patch ** 2
        init_linear(p, rng, "embed", pd, D)
        p["pos"] = rng.normal(0.0, 0.02, size=(spec.grid ** 2, D))
        init_norm(p, "ln1", D)
        for name in ("q", "k", "v", "o"):
            init_linear(p, rng, f"attn.{name}", D, D)
        init_norm(p, "ln2", D)
        init_linear(p, rng, "mlp.fc1", D, MLP_RATIO * D)
        init_linear(p, rng, "mlp.fc2", MLP_RATIO * D, D)
        init_norm(p, "lnf", D)
        init_linear(p, rng, "head", D, spec.num_classes)
    return p


def param_count(spec: ClassifierSpec) -> int:
    """Closed-form trainable parameter count."""
    k = spec.num_classes
    if spec.family == LOCAL:
        total, cin = 0, 3
        for w in spec.widths:
            total += w * cin * 9 + 2 * w
            cin = w
        return total + cin * k + k
    D, pd, n = spec.dim, 3 * spec.patch ** 2, spec.grid ** 2
    Dh = MLP_RATIO * D
    attn = 2 * D + 4 * (D * D + D)
    mlp = 2 * D + (D * Dh + Dh) + (Dh * D + D)
    return (pd * D + D) + n * D + attn + mlp + 2 * D + (D * k + k)


def forward(spec: ClassifierSpec, p: dict[str, Var], x: Var, training: bool = False,
            bn_stats: dict | None = None) -> tuple[Var, dict[str, Var]]:
    """Logits (N, K) and named intermediate features for an NCHW batch."""
    if x.shape[1:] != (3, spec.input_size, spec.input_size):
        raise T.ShapeError(f"classifier expects (N, 3, {spec.input_size}, {spec.input_size}), got {x.shape}")
    feats: dict[str, Var] = {}
    if spec.family == LOCAL:
        h = T.max_pool2(conv_block(p, "block1", x, training, bn_stats))
        h = T.max_pool2(conv_block(p, "block2", h, training, bn_stats))
        h = conv_block(p, "block3", h, training, bn_stats)
        feats["block3"] = h
        z = T.global_avg_pool(T.max_pool2(h))
        feats["penultimate"] = z
        return T.linear(z, p["head.weight"], p["head.bias"]), feats
    N, P, g, D = x.shape[0], spec.patch, spec.grid, spec.dim
    patches = x.reshape(N, 3, g, P, g, P).transpose(0, 2, 4, 1, 3, 5).reshape(N, g * g, 3 * P * P)
    tok = T.linear(patches, p["embed.weight"], p["embed.bias"]) + p["pos"]
    h = T.layer_norm(tok, p["ln1.gamma"], p["ln1.beta"])
    q = T.linear(h, p["attn.q.weight"], p["attn.q.bias"])
    k = T.linear(h, p["attn.k.weight"], p["attn.k.bias"])
    v = T.linear(h, p["attn.v.weight"], p["attn.v.bias"])
    att = T.softmax(q @ k.transpose(0, 2, 1) * (1.0 / np.sqrt(D)), axis=-1)
    tok = tok + T.linear(att @ v, p["attn.o.weight"], p["attn.o.bias"])
    h = T.relu(T.linear(T.layer_norm(tok, p["ln2.gamma"], p["ln2.beta"]), p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    tok = tok + T.linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"])
    grid = tok.reshape(N, g, g, D).transpose(0, 3, 1, 2)
    feats["tokens"] = grid
    tok = grid.transpose(0, 2, 3, 1).reshape(N, g * g, D)
    z = T.mean(T.layer_norm(tok, p["lnf.gamma"], p["lnf.beta"]), axis=1)
    feats["penultimate"] = z
    return T.linear(z, p["head.weight"], p["head.bias"]), feats


def _nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    return (images[None] if images.ndim == 3 else images).transpose(0, 3, 1, 2)


def predict(params: ModelParams, spec: ClassifierSpec, images: np.ndarray) -> np.ndarray:
    """Logits for (H, W, 3) or (N, H, W, 3) images."""
    tape = Tape()
    logits, _ = forward(spec, params.bind(tape, trainable=False), tape.const(_nchw(images)))
    return logits.value.astype(np.float64)


def features(params: ModelParams, spec: ClassifierSpec, images: np.ndarray, layer: str = "penultimate") -> np.ndarray:
    tape = Tape()
    _, feats = forward(spec, params.bind(tape, trainable=False), tape.const(_nchw(images)))
    if layer not in feats:
        raise KeyError(f"unknown layer {layer!r}; available: {sorted(feats)}")
    return feats[layer].value.astype(np.float64)


def train_classifier(params: ModelParams, spec: ClassifierSpec, images: np.ndarray, labels: np.ndarray,
                     epochs: int, lr: float = 3e-3, batch_size: int = 32,
                     seed: int = 0) -> tuple[ModelParams, list[float]]:
    """Cross-entropy training; returns params and per-epoch training accuracy."""
    if len(images) == 0:
        raise ValueError("empty corpus")
    xs, ys = _nchw(images), np.asarray(labels)
    rng = np.random.default_rng(seed)
    state = AdamState()
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(xs))
        correct, losses = 0, []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            bound = params.bind(tape)
            stats: dict[str, np.ndarray] = {}
            logits, _ = forward(spec, bound, tape.const(xs[idx]), training=True, bn_stats=stats)
            loss = cross_entropy(logits, ys[idx])
            if not np.isfinite(loss.value):
                raise T.NumericError("non-finite classifier loss")
            grads = grads_of(tape.backward(loss), bound)
            params, state = optimizer_step(params, grads, state, lr)
            params = apply_bn_stats(params, stats)
            correct += int((logits.value.argmax(axis=1) == ys[idx]).sum())
            losses.append(float(loss.value))
        history.append(correct / len(xs))
        log.info("%s epoch %d loss %.4f train-acc %.3f", spec.family, epoch, np.mean(losses), history[-1])
    if epochs:
        params = mark_trained(params, epochs)
    return params, history


# ---------------------------------------------------------------- Grad-CAM


def _normalise_maps(cam: Var) -> Var:
    """Per-map min-max to [0, 1]; constant maps become all zeros."""
    lo = T.amin(cam, axis=(-2, -1), keepdims=True)
    hi = T.amax(cam, axis=(-2, -1), keepdims=True)
    span = hi - lo
    fix = (span.value == 0).astype(span.value.dtype)
    return (cam - lo) / (span + fix)


class FrozenCamWeights:
    """Record Grad-CAM channel weights once, then replay them in call order.

    The weights are stop-gradient constants, so a finite-difference check of
    anything downstream must hold them fixed; this makes that possible.
    """

    active: "FrozenCamWeights | None" = None

    def __init__(self):
        self.saved: list[np.ndarray] = []
        self.replay = False
        self._pos = 0

    def __enter__(self):
        FrozenCamWeights.active = self
        self._pos = 0
        return self

    def __exit__(self, *exc):
        FrozenCamWeights.active = None
        self.replay = True

    def take(self, fresh: Callable[[], np.ndarray]) -> np.ndarray:
        if not self.replay:
            self.saved.append(fresh())
            return self.saved[-1]
        w = self.saved[self._pos]
        self._pos += 1
        return w


def cam_from_tap(tape: Tape, logits: Var, tap: Var, out_size: tuple[int, int],
                 target_class: np.ndarray | int | None = None) -> Var:
    """Grad-CAM maps (N, H, W) from a recorded forward pass.

    Channel weights are the spatially averaged gradients of the target logit
    and enter the map as constants; the map itself stays differentiable in
    the tap activations.
    """
    N = logits.shape[0]
    if target_class is None:
        target = logits.value.argmax(axis=1)
    else:
        target = np.broadcast_to(np.asarray(target_class), (N,))

    def channel_weights() -> np.ndarray:
        score = T.sum_(logits[np.arange(N), target])
        dA = tape.backward(score, wrt=[tap]).get(tap.id)
        if dA is None:
            dA = np.zeros_like(tap.value)
        return dA.mean(axis=(2, 3), keepdims=True)

    frozen = FrozenCamWeights.active
    weights = tape.const(frozen.take(channel_weights) if frozen else channel_weights())
    cam = T.relu(T.sum_(tap * weights, axis=1))
    return T.bilinear_resize(_normalise_maps(cam), *out_size)


def grad_cam_generic(model: Callable[[Tape, Var], tuple[Var, Var]], images: np.ndarray,
                     target_class=None) -> np.ndarray:
    """Grad-CAM for any ``model(tape, x) -> (logits, tap)``."""
    x = _nchw(images)
    tape = Tape()
    logits, tap = model(tape, tape.leaf(x))
    return cam_from_tap(tape, logits, tap, x.shape[2:], target_class).value.astype(np.float64)


def grad_cam(params: ModelParams, spec: ClassifierSpec, img: np.ndarray, target_class=None,
             tap_layer: str | None = None) -> np.ndarray:
    """Attention map(s) in [0, 1] at image resolution: (H, W) or (N, H, W)."""
    tap_layer = tap_layer or spec.tap_layer
    if tap_layer != spec.tap_layer:
        raise KeyError(f"unknown tap layer {tap_layer!r} for {spec.family} (use {spec.tap_layer!r})")

    def model(tape, x):
        logits, feats = forward(spec, params.bind(tape, trainable=False), x)
        return logits, feats[tap_layer]

    maps = grad_cam_generic(model, img, target_class)
    return maps[0] if np.asarray(img).ndim == 3 else maps


def grad_cam_on_tape(params: ModelParams, spec: ClassifierSpec, x: Var, target_class=None) -> Var:
    """Differentiable Grad-CAM of an NCHW variable already on a tape."""
    logits, feats = forward(spec, params.bind(x.tape, trainable=False), x)
    return cam_from_tap(x.tape, logits, feats[spec.tap_layer], x.shape[2:], target_class)


def heatmap_diff_mask(h_ori: np.ndarray, h_adv: np.ndarray, T_: float = 0.3) -> np.ndarray:
    """Binary mask of pixels where the heatmaps differ by strictly more than ``T_``."""
    h_ori, h_adv = np.asarray(h_ori), np.asarray(h_adv)
    if h_ori.shape != h_adv.shape:
        raise T.ShapeError(f"heatmap shapes differ: {h_ori.shape} vs {h_adv.shape}")
    if not 0.0 < T_ < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.abs(h_ori - h_adv) > T_).astype(np.uint8)
