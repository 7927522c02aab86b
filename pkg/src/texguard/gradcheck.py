"""Finite-difference gradient checks for every differentiable op.

Each case builds a scalar from one or more float64 leaves; the tape gradient
is compared with central differences. ``run_suite`` is what the
``gradcheck`` subcommand executes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import FrozenCamWeights
from .layers import conv_block, cross_entropy, init_conv_block, pad_edge
from .params import ModelParams
from .tensor import Tape, Var

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tol)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], which: int,
                 coords: np.ndarray | None = None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``inputs[which]`` (optionally only at flat ``coords``)."""
    x = inputs[which]
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        fp = f(inputs)
        flat[c] = old - h
        fm = f(inputs)
        flat[c] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check(name: str, fn: Callable[..., Var], inputs: list[np.ndarray], tol: float = OP_TOL,
          max_coords: int | None = None, seed: int = 0) -> CheckResult:
    """Compare tape and numeric gradients of ``fn(*leaves)`` for every input.

    Grad-CAM channel weights are frozen at the base point for the numeric side.
    """
    t0 = time.perf_counter()
    with T.high_precision():
        inputs = [np.array(x, dtype=np.float64) for x in inputs]
        frozen = FrozenCamWeights()

        def scalar(xs):
            tape = Tape()
            with frozen:
                return float(fn(*[tape.leaf(x) for x in xs]).value)

        tape = Tape()
        leaves = [tape.leaf(x) for x in inputs]
        with frozen:
            out = fn(*leaves)
        grads = tape.backward(out)
        rng = np.random.default_rng(seed)
        analytic, numeric = [], []
        for i, leaf in enumerate(leaves):
            g = grads.get(leaf.id, np.zeros_like(inputs[i])).reshape(-1)
            coords = None
            if max_coords is not None and g.size > max_coords:
                coords = np.sort(rng.choice(g.size, max_coords, replace=False))
            analytic.append(g if coords is None else g[coords])
            numeric.append(numeric_grad(scalar, inputs, i, coords))
    err = rel_error(np.concatenate(analytic), np.concatenate(numeric))
    return CheckResult(name, err, tol, time.perf_counter() - t0)


def _weighted(v: Var, seed: int = 99) -> Var:
    """Reduce to a scalar with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=v.shape)
    return T.sum_(v * v.tape.const(w))


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Var], list[np.ndarray]]]:
    def r(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    def away(*shape):
        # values kept clear of kinks (0 for relu/abs, +-0.5 for clamp)
        v = rng.uniform(0.1, 0.4, size=shape) * rng.choice([-1, 1], size=shape)
        return v + rng.choice([-1.0, 0.0, 1.0], size=shape)

    def distinct(*shape):
        return rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64)).reshape(shape) * 0.1 + r(*shape) * 0.01

    bn_g, bn_b = pos(3), r(3)
    return [
        ("add", lambda a, b: _weighted(a + b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: _weighted(a - b), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: _weighted(a * b), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: _weighted(a / b), [r(3, 4), pos(3, 4)]),
        ("neg", lambda a: _weighted(-a), [r(5)]),
        ("exp", lambda a: _weighted(T.exp(a)), [r(5)]),
        ("log", lambda a: _weighted(T.log(a)), [pos(5)]),
        ("abs", lambda a: _weighted(T.abs_(a)), [away(6)]),
        ("square", lambda a: _weighted(T.square(a)), [r(5)]),
        ("sqrt", lambda a: _weighted(T.sqrt(a)), [pos(5)]),
        ("relu", lambda a: _weighted(T.relu(a)), [away(6)]),
        ("sigmoid", lambda a: _weighted(T.sigmoid(a)), [r(5)]),
        ("tanh", lambda a: _weighted(T.tanh(a)), [r(5)]),
        ("clamp", lambda a: _weighted(T.clamp(a, -0.5, 0.5)), [away(8) * 0.8]),
        ("sum", lambda a: _weighted(T.sum_(a, axis=1)), [r(3, 4)]),
        ("mean", lambda a: _weighted(T.mean(a, axis=(0, 2), keepdims=True)), [r(2, 3, 4)]),
        ("amax", lambda a: _weighted(T.amax(a, axis=1)), [distinct(3, 5)]),
        ("amin", lambda a: _weighted(T.amin(a, axis=(-2, -1), keepdims=True)), [distinct(2, 3, 4)]),
        ("reshape", lambda a: _weighted(a.reshape(4, 3)), [r(2, 6)]),
        ("transpose", lambda a: _weighted(a.transpose(2, 0, 1)), [r(2, 3, 4)]),
        ("index", lambda a: _weighted(a[np.array([0, 2, 2]), 1:]), [r(3, 4)]),
        ("concat", lambda a, b: _weighted(T.concat([a, b], axis=1)), [r(2, 3), r(2, 2)]),
        ("matmul", lambda a, b: _weighted(a @ b), [r(2, 3, 4), r(4, 5)]),
        ("linear", lambda x, w, b: _weighted(T.linear(x, w, b)), [r(3, 4), r(2, 4), r(2)]),
        ("softmax", lambda a: _weighted(T.softmax(a, axis=-1)), [r(3, 5)]),
        ("log_softmax", lambda a: _weighted(T.log_softmax(a, axis=-1)), [r(3, 5)]),
        ("cross_entropy", lambda a: cross_entropy(a, np.array([0, 1, 1])), [r(3, 2)]),
        ("conv2d", lambda x, w, b: _weighted(T.conv2d(x, w, b, 1, 1)), [r(2, 2, 5, 6), r(3, 2, 3, 3), r(3)]),
        ("conv2d_stride2", lambda x, w: _weighted(T.conv2d(x, w, None, 2, 0)), [r(1, 2, 7, 7), r(2, 2, 3, 3)]),
        ("conv2d_1x1", lambda x, w, b: _weighted(T.conv2d(x, w, b, 1, 0)), [r(2, 3, 4, 4), r(2, 3, 1, 1), r(2)]),
        ("max_pool2", lambda x: _weighted(T.max_pool2(x)), [distinct(2, 2, 4, 6)]),
        ("avg_pool2", lambda x: _weighted(T.avg_pool2(x)), [r(2, 2, 4, 6)]),
        ("global_avg_pool", lambda x: _weighted(T.global_avg_pool(x)), [r(2, 3, 4, 4)]),
        ("batch_norm_train", lambda x, g, b: _weighted(T.batch_norm(x, g, b, 1e-5)), [r(3, 3, 4, 4), bn_g, bn_b]),
        ("batch_norm_eval", lambda x, g, b: _weighted(T.batch_norm(x, g, b, 1e-5, np.array([0.1, -0.2, 0.3]),
                                                                  np.array([1.5, 0.7, 2.0]))),
         [r(2, 3, 4, 4), bn_g, bn_b]),
        ("layer_norm", lambda x, g, b: _weighted(T.layer_norm(x, g, b)), [r(2, 3, 5), pos(5), r(5)]),
        ("bilinear_up", lambda x: _weighted(T.bilinear_resize(x, 8, 10)), [r(1, 2, 4, 5)]),
        ("bilinear_down", lambda x: _weighted(T.bilinear_resize(x, 3, 2)), [r(2, 6, 5)]),
        ("pad_edge", lambda x: _weighted(pad_edge(x, 2)), [r(1, 2, 3, 4)]),
    ]


def _composite_cases(rng: np.random.Generator):
    from . import attention, surrogate
    from .attention import ClassifierSpec
    from .perturb import loss_cam

    cases = []
    p = ModelParams()
    init_conv_block(p, rng, "blk", 2, 3)
    names = list(p)

    def block(x, *ws):
        bound = dict(zip(names, ws))
        return _weighted(conv_block(bound, "blk", x, training=True))

    cases.append(("conv_block", block, [rng.normal(size=(2, 2, 5, 5))] + [p[k] for k in names], None))

    sp = surrogate.build_surrogate(3)
    img = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))

    def gen_energy(x):
        return T.sum_(T.square(surrogate.forward(sp.bind(x.tape, trainable=False), x)))

    cases.append(("surrogate_apply", gen_energy, [img], None))

    spec = ClassifierSpec("local-conv", input_size=16, widths=(4, 4, 4))
    clf = attention.build_classifier(spec, 4)

    def cam(x):
        return _weighted(attention.grad_cam_on_tape(clf, spec, x))

    cases.append(("grad_cam", cam, [rng.uniform(0, 1, size=(2, 3, 16, 16))], 40))

    gspec = ClassifierSpec("global-attention", input_size=16, patch=4, dim=8)
    gclf = attention.build_classifier(gspec, 5)

    def gcam(x):
        return _weighted(attention.grad_cam_on_tape(gclf, gspec, x))

    cases.append(("grad_cam_global", gcam, [rng.uniform(0, 1, size=(1, 3, 16, 16))], 40))

    h_ori = rng.uniform(0, 1, size=(2, 6, 6))
    h_adv0 = np.clip(h_ori + rng.choice([-0.6, 0.6, 0.05], size=h_ori.shape), 0, 1)

    def cam_loss(h):
        return loss_cam(h_ori, h, 0.3)[0]

    cases.append(("loss_cam", cam_loss, [h_adv0], None))
    return cases


def end_to_end_case(seed: int = 0, size: int = 32, n: int = 2, max_coords: int = 24) -> CheckResult:
    """Gradient of the total defense loss w.r.t. a sample of enhancement weights."""
    from . import attention, surrogate
    from .attention import ClassifierSpec
    from .corpus import make_corpus
    from .layers import mark_trained
    from .perturb import DefenseConfig, Dependencies, LossWeights, build_enhancer, defense_loss, prepare
    from .texture import build_texture_params

    t0 = time.perf_counter()
    with T.high_precision():
        corpus = make_corpus(n, seed, size=size)
        lspec = ClassifierSpec("local-conv", input_size=size, widths=(4, 4, 4))
        gspec = ClassifierSpec("global-attention", input_size=size, patch=8, dim=8)
        deps = Dependencies(
            texture=build_texture_params(seed),
            local=mark_trained(attention.build_classifier(lspec, seed + 1), 1), local_spec=lspec,
            global_=mark_trained(attention.build_classifier(gspec, seed + 2), 1), global_spec=gspec,
            surrogates={"hair-recolor": mark_trained(surrogate.build_surrogate(seed + 3), 1)},
        )
        prep = prepare(corpus.images, deps)
        enh = build_enhancer(seed + 4)
        cfg = DefenseConfig(epsilon=16 / 255)
        # a low threshold keeps the attention-difference mask nonempty for untrained models
        w = LossWeights(T=0.02)
        idx = np.arange(n)
        names = enh.trainable_names()
        rng = np.random.default_rng(seed)
        flat_sizes = [enh[k].size for k in names]
        picks = rng.choice(sum(flat_sizes), max_coords, replace=False)
        offsets = np.cumsum([0] + flat_sizes)

        def total(params: ModelParams) -> tuple[Var, Tape, dict]:
            return defense_loss(params, prep, idx, deps, cfg, w, training=True)

        frozen = FrozenCamWeights()
        with frozen:
            loss, tape, bound = total(enh)
        grads = tape.backward(loss)
        analytic, numeric = [], []
        base = {k: enh[k].astype(np.float64) for k in enh}
        for pick in np.sort(picks):
            i = int(np.searchsorted(offsets, pick, side="right") - 1)
            k, j = names[i], int(pick - offsets[i])
            analytic.append(grads.get(bound[k].id, np.zeros(enh[k].shape)).reshape(-1)[j])

            def f(delta, k=k, j=j):
                vals = dict(base)
                arr = vals[k].copy().reshape(-1)
                arr[j] += delta
                vals[k] = arr.reshape(base[k].shape)
                with frozen:
                    return float(_eval64(vals, prep, idx, deps, cfg, w))

            numeric.append((f(FD_STEP) - f(-FD_STEP)) / (2 * FD_STEP))
    err = rel_error(np.array(analytic), np.array(numeric))
    if not frozen.saved:
        err = float("nan")  # the attention term never ran: the check would be vacuous
    return CheckResult("defense_end_to_end", err, END_TO_END_TOL, time.perf_counter() - t0)


def _eval64(vals: dict[str, np.ndarray], prep, idx, deps, cfg, w) -> float:
    """Defense loss with float64 enhancement weights (ModelParams would round to float32)."""
    from .perturb import _defense_losses

    tape = Tape()
    bound = {k: tape.leaf(v, requires_grad=False) for k, v in vals.items()}
    total, *_ = _defense_losses(tape, bound, prep, idx, deps, cfg, w, True, None)
    return float(total.value)


OP_POINTS = 10


def run_suite(seed: int = 0, include_end_to_end: bool = True, log: Callable[[str], None] | None = None,
              points: int = OP_POINTS) -> list[CheckResult]:
    """All checks; each primitive op is tried at ``points`` random inputs and its worst error kept."""
    worst: dict[str, CheckResult] = {}
    for k in range(points):
        for name, fn, inputs in _op_cases(np.random.default_rng([seed, k])):
            r = check(name, fn, inputs)
            prev = worst.get(name)
            if prev is None or not r.rel_error <= prev.rel_error:
                r.seconds += prev.seconds if prev else 0.0
                worst[name] = r
            else:
                prev.seconds += r.seconds
    results = list(worst.values())
    rng = np.random.default_rng(seed)
    for name, fn, inputs, coords in _composite_cases(rng):
        results.append(check(name, fn, inputs, max_coords=coords))
    if include_end_to_end:
        results.append(end_to_end_case(seed))
    if log is not None:
        for r in results:
            log(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<22} rel_err={r.rel_error:.2e} tol={r.tol:.0e} ({r.seconds:.2f}s)")
    return results
