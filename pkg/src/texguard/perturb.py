"""Perturbation enhancement module, its training objective, and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attention, surrogate
from . import tensor as T
from .attention import ClassifierSpec
from .layers import apply_bn_stats, conv_block, init_conv, init_conv_block, is_trained, mark_trained
from .params import AdamState, ModelParams, grads_of, optimizer_step
from .tensor import Tape, Var
from .texture import FilterParams, DEFAULT_LUMA, TEXTURE_WIDTH, bilateral_filter, texture_features, to_grayscale

log = logging.getLogger(__name__)

DUAL, LOCAL_ONLY, GLOBAL_ONLY = "dual", "local-only", "global-only"
VARIANTS = (DUAL, LOCAL_ONLY, GLOBAL_ONLY)
ENH_WIDTH = 16


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.04
    lambda3: float = 0.1
    T: float = 0.3

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 < self.T < 1.0:
            raise ValueError("threshold T must lie in (0, 1)")


@dataclass(frozen=True)
class DefenseConfig:
    epsilon: float = 5.5 / 255.0
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0
    variant: str = DUAL

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 16.0 / 255.0 + 1e-12:
            raise ValueError(f"epsilon must lie in (0, 16/255], got {self.epsilon}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class Dependencies:
    """Every trained model the defense consumes."""

    texture: ModelParams
    local: ModelParams
    local_spec: ClassifierSpec
    global_: ModelParams
    global_spec: ClassifierSpec
    surrogates: dict[str, ModelParams]
    filter_params: FilterParams = field(default_factory=FilterParams)
    luma: tuple[float, float, float] = DEFAULT_LUMA
    lbp_after_pool: bool = True

    def check(self) -> None:
        for name, p in (("local classifier", self.local), ("global classifier", self.global_),
                        *((f"surrogate {k}", v) for k, v in self.surrogates.items())):
            if not is_trained(p):
                raise ValueError(f"{name} is untrained (no trained-epochs entry)")
        if not self.surrogates:
            raise ValueError("at least one surrogate is required")


# ---------------------------------------------------------------- enhancement module


def build_enhancer(seed: int, tex_channels: int = TEXTURE_WIDTH) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    init_conv_block(p, rng, "enh1", tex_channels, ENH_WIDTH)
    p["fuse.weight"] = np.ones(ENH_WIDTH)
    init_conv_block(p, rng, "enh2", ENH_WIDTH, ENH_WIDTH)
    init_conv_block(p, rng, "enh3", ENH_WIDTH, ENH_WIDTH)
    init_conv(p, rng, "head", ENH_WIDTH, 3, k=1)
    return p


def fuse_and_enhance(p: dict[str, Var], tex: Var, m_ori: Var, out_size: tuple[int, int], training: bool = False,
                     bn_stats: dict | None = None, taps: dict | None = None) -> Var:
    """Perturbation direction field (N, 3, H, W) in (-1, 1).

    ``tex`` is (N, C, h, w) texture features, ``m_ori`` (N, H', W') attention.
    """
    h = T.avg_pool2(conv_block(p, "enh1", tex, training, bn_stats))
    gh, gw = h.shape[2:]
    m = T.bilinear_resize(m_ori, gh, gw)
    if m.shape[1:] != (gh, gw):
        raise T.ShapeError(f"attention grid {m.shape[1:]} != feature grid {(gh, gw)}")
    fw = p["fuse.weight"].reshape(1, -1, 1, 1)
    fused = h * fw * m.reshape(m.shape[0], 1, gh, gw)
    if taps is not None:
        taps["fused"] = fused
    h = conv_block(p, "enh2", fused, training, bn_stats)
    h = conv_block(p, "enh3", h, training, bn_stats)
    d = T.tanh(T.conv2d(h, p["head.weight"], p["head.bias"], 1, 0))
    return T.bilinear_resize(d, *out_size)


def project_and_apply(img, delta, epsilon: float):
    """``clamp(img + epsilon * delta, 0, 1)`` for arrays or tape variables."""
    if isinstance(delta, Var):
        x = img if isinstance(img, Var) else delta.tape.const(img)
        return T.clamp(x + delta * epsilon, 0.0, 1.0)
    return np.clip(np.asarray(img, dtype=np.float64) + epsilon * np.asarray(delta, dtype=np.float64), 0.0, 1.0)


# ---------------------------------------------------------------- losses


def _check_same(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise T.ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_mae(i_adv, i_ori):
    _check_same(i_adv, i_ori)
    if isinstance(i_adv, Var) or isinstance(i_ori, Var):
        tape = i_adv.tape if isinstance(i_adv, Var) else i_ori.tape
        a = i_adv if isinstance(i_adv, Var) else tape.const(i_adv)
        b = i_ori if isinstance(i_ori, Var) else tape.const(i_ori)
        return T.mean(T.abs_(a - b))
    return float(np.mean(np.abs(np.asarray(i_adv, dtype=np.float64) - np.asarray(i_ori, dtype=np.float64))))


def loss_mse(g_ori, g_adv):
    """Negative mean squared difference of generated images (always <= 0)."""
    _check_same(g_ori, g_adv)
    if isinstance(g_adv, Var) or isinstance(g_ori, Var):
        tape = g_adv.tape if isinstance(g_adv, Var) else g_ori.tape
        a = g_ori if isinstance(g_ori, Var) else tape.const(g_ori)
        b = g_adv if isinstance(g_adv, Var) else tape.const(g_adv)
        return -T.mean(T.square(a - b))
    d = np.asarray(g_ori, dtype=np.float64) - np.asarray(g_adv, dtype=np.float64)
    return -float(np.mean(d * d))


def loss_cam(h_ori, h_adv, T_: float = 0.3):
    """Attention discrepancy loss and a flag that is True when the mask is empty.

    Takes single maps (H, W) or batches (N, H, W); batched losses are
    averaged over maps, empty-mask maps contributing 0.
    """
    _check_same(h_ori, h_adv)
    on_tape = isinstance(h_adv, Var) or isinstance(h_ori, Var)
    hv_o = h_ori.value if isinstance(h_ori, Var) else np.asarray(h_ori, dtype=np.float64)
    hv_a = h_adv.value if isinstance(h_adv, Var) else np.asarray(h_adv, dtype=np.float64)
    batched = hv_o.ndim == 3
    if not batched:
        hv_o, hv_a = hv_o[None], hv_a[None]
    mask = (np.abs(hv_o - hv_a) > T_).astype(np.float64)
    counts = mask.sum(axis=(1, 2))
    empty = counts == 0
    flag = bool(empty.all()) if batched else bool(empty[0])
    if not on_tape:
        vals = [0.0 if e else -np.log((m * np.abs(a - b)).sum() / c)
                for m, a, b, c, e in zip(mask, hv_o, hv_a, counts, empty)]
        return float(np.mean(vals)), flag
    tape = h_adv.tape if isinstance(h_adv, Var) else h_ori.tape
    a = h_ori if isinstance(h_ori, Var) else tape.const(h_ori)
    b = h_adv if isinstance(h_adv, Var) else tape.const(h_adv)
    if not batched:
        a, b = a.reshape(1, *a.shape), b.reshape(1, *b.shape)
    if flag:
        return tape.const(0.0), True
    masked = T.sum_(T.abs_(a - b) * tape.const(mask.astype(a.value.dtype)), axis=(1, 2))
    # empty rows: substitute ratio 1 so their log term is exactly 0
    ratio = masked / tape.const(np.where(empty, 1.0, counts)) + tape.const(empty.astype(a.value.dtype))
    return -T.mean(T.log(ratio)), flag


def loss_total(mae, mse, cam, w: LossWeights = LossWeights()):
    return w.lambda1 * mae + w.lambda2 * mse + w.lambda3 * cam


# ---------------------------------------------------------------- training


@dataclass
class Prepared:
    """Per-image quantities that do not depend on the enhancement weights."""

    images: np.ndarray          # (N, 3, H, W)
    texture: np.ndarray         # (N, C, H/2, W/2)
    attention: np.ndarray       # (N, H, W)
    generated: dict[str, np.ndarray]   # edit kind -> (N, 3, H, W)
    heatmaps: dict[str, np.ndarray]    # edit kind -> (N, H, W)


def texture_branch(images: np.ndarray, deps: Dependencies) -> np.ndarray:
    out = []
    for img in images:
        filtered = bilateral_filter(to_grayscale(img, deps.luma), deps.filter_params)
        out.append(texture_features(filtered, deps.texture, lbp_after_pool=deps.lbp_after_pool))
    return np.stack(out)


def attention_branch(images: np.ndarray, deps: Dependencies, variant: str) -> np.ndarray:
    """M_ori from the local classifier; all-ones when the local branch is ablated."""
    if variant == GLOBAL_ONLY:
        return np.ones(images.shape[:3])
    return np.stack([attention.grad_cam(deps.local, deps.local_spec, img) for img in images])


def prepare(images: np.ndarray, deps: Dependencies, variant: str = DUAL, with_targets: bool = True) -> Prepared:
    images = np.asarray(images, dtype=np.float64)
    tex = texture_branch(images, deps)
    att = attention_branch(images, deps, variant)
    gen, heat = {}, {}
    if with_targets:
        for kind, sp in deps.surrogates.items():
            g = surrogate.apply(sp, images)
            gen[kind] = g.transpose(0, 3, 1, 2)
            heat[kind] = attention.grad_cam(deps.global_, deps.global_spec, g)
    return Prepared(images.transpose(0, 3, 1, 2), tex, att, gen, heat)


def _defense_losses(tape: Tape, enh: dict[str, Var], prep: Prepared, idx, deps: Dependencies,
                    cfg: DefenseConfig, w: LossWeights, training: bool, bn_stats: dict | None):
    x = prep.images[idx]
    delta = fuse_and_enhance(enh, tape.const(prep.texture[idx]), tape.const(prep.attention[idx]),
                             x.shape[2:], training, bn_stats)
    x_adv = project_and_apply(x, delta, cfg.epsilon)
    mae = loss_mae(x_adv, x)
    mses, cams = [], []
    use_cam = cfg.variant != LOCAL_ONLY and w.lambda3 > 0
    for kind, sp in deps.surrogates.items():
        g_adv = surrogate.apply(sp, x_adv, tape)
        mses.append(loss_mse(prep.generated[kind][idx], g_adv))
        if use_cam:
            h_adv = attention.grad_cam_on_tape(deps.global_, deps.global_spec, g_adv)
            cams.append(loss_cam(prep.heatmaps[kind][idx], h_adv, w.T)[0])
    mse = sum(mses[1:], mses[0]) * (1.0 / len(mses))
    cam = sum(cams[1:], cams[0]) * (1.0 / len(cams)) if cams else tape.const(0.0)
    total = loss_total(mae, mse, cam, w)
    return total, mae, mse, cam


def defense_loss(enh_params: ModelParams, prep: Prepared, idx, deps: Dependencies, cfg: DefenseConfig,
                 w: LossWeights = LossWeights(), training: bool = True):
    """Total loss on a batch plus the tape and bound enhancement leaves (for gradient checks)."""
    tape = Tape()
    enh = enh_params.bind(tape)
    total, *_ = _defense_losses(tape, enh, prep, idx, deps, cfg, w, training, None)
    return total, tape, enh


def train_defense(prep: Prepared, deps: Dependencies, cfg: DefenseConfig, w: LossWeights = LossWeights(),
                  enh_params: ModelParams | None = None) -> tuple[ModelParams, list[dict]]:
    """Train the enhancement weights; returns params and a per-epoch loss log."""
    deps.check()
    n = len(prep.images)
    if n == 0:
        raise ValueError("empty corpus")
    params = enh_params if enh_params is not None else build_enhancer(cfg.seed, prep.texture.shape[1])
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            tape = Tape()
            enh = params.bind(tape)
            stats: dict[str, np.ndarray] = {}
            total, mae, mse, cam = _defense_losses(tape, enh, prep, idx, deps, cfg, w, True, stats)
            grads = grads_of(tape.backward(total), enh)
            params, state = optimizer_step(params, grads, state, cfg.lr)
            params = apply_bn_stats(params, stats)
            sums += [float(mae.value), float(mse.value), float(cam.value), float(total.value)]
            batches += 1
        row = dict(zip(("epoch", "mae", "mse", "cam", "total"), (epoch, *(sums / batches))))
        history.append(row)
        log.info("defense %s epoch %d mae %.5f mse %.5f cam %.4f total %.5f", cfg.variant, epoch,
                 row["mae"], row["mse"], row["cam"], row["total"])
    if cfg.epochs:
        params = mark_trained(params, cfg.epochs)
    return params, history


def perturbation(enh_params: ModelParams, prep: Prepared) -> np.ndarray:
    """Inference-mode direction field (N, 3, H, W)."""
    tape = Tape()
    d = fuse_and_enhance(enh_params.bind(tape, trainable=False), tape.const(prep.texture),
                         tape.const(prep.attention), prep.images.shape[2:], training=False)
    return d.value.astype(np.float64)


def protect(images: np.ndarray, enh_params: ModelParams, deps: Dependencies, cfg: DefenseConfig) -> np.ndarray:
    """Protected images (same layout as ``images``); no parameter is modified."""
    if not is_trained(enh_params):
        raise ValueError("enhancement weights are untrained")
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    prep = prepare(batch, deps, cfg.variant, with_targets=False)
    adv = project_and_apply(batch.transpose(0, 3, 1, 2), perturbation(enh_params, prep), cfg.epsilon)
    adv = adv.transpose(0, 2, 3, 1)
    return adv[0] if single else adv
