"""Reverse-mode automatic differentiation on a linear tape.

Every operation appends a node to the tape holding its value, its parent
node ids and a closure computing parent gradients.  Because nodes are only
ever appended, ids are a topological order and the backward sweep is a
single reverse scan.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_precision(name: str) -> None:
    """Switch the working float type (``"float32"`` or ``"float64"``)."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name).type


@contextmanager
def high_precision() -> Iterator[None]:
    """Run the enclosed block in float64, e.g. for gradient checks."""
    prev = _DTYPE
    set_precision("float64")
    try:
        yield
    finally:
        set_precision(np.dtype(prev).name)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass
class TapeNode:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    backward: BackwardFn | None = None
    requires_grad: bool = False
    grad: np.ndarray | None = field(default=None, repr=False)


class Tape:
    """Records operations for one forward pass.  Not thread safe."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[TapeNode] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True, op: str = "leaf") -> "Var":
        arr = np.array(value, dtype=_DTYPE, copy=True)
        node = TapeNode(len(self.nodes), op, (), arr, None, requires_grad)
        self.nodes.append(node)
        return Var(self, node.id)

    def const(self, value) -> "Var":
        return self.leaf(value, requires_grad=False, op="const")

    def record(self, op: str, value: np.ndarray, parents: Sequence["Var"], backward: BackwardFn) -> "Var":
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands belong to different tapes")
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by {op}")
        req = any(self.nodes[p.id].requires_grad for p in parents)
        node = TapeNode(len(self.nodes), op, tuple(p.id for p in parents), value, backward if req else None, req)
        self.nodes.append(node)
        return Var(self, node.id)

    def backward(self, loss: "Var", wrt: Sequence["Var"] | None = None) -> dict[int, np.ndarray]:
        """Gradient table (node id -> d loss / d node) for a scalar ``loss``.

        With ``wrt`` the sweep stops below the smallest requested id, which is
        exact because a node's gradient only depends on later nodes.
        """
        root = self.nodes[loss.id]
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {root.value.shape}")
        floor = min(v.id for v in wrt) if wrt else 0
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(root.value)}
        for nid in range(loss.id, floor - 1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            needs = [self.nodes[p].requires_grad and p >= floor for p in node.parents]
            if not any(needs):
                continue
            for pid, need, pg in zip(node.parents, needs, node.backward(g, needs)):
                if not need or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads

    def materialize(self, grads: dict[int, np.ndarray]) -> None:
        """Store a gradient table on the nodes' ``grad`` fields."""
        for nid, g in grads.items():
            self.nodes[nid].grad = g


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, o):
        return add(self, self._lift(o))

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, self._lift(o))

    def __rsub__(self, o):
        return sub(self._lift(o), self)

    def __mul__(self, o):
        return mul(self, self._lift(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, self._lift(o))

    def __rtruediv__(self, o):
        return div(self._lift(o), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, self._lift(o))

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Var, b: Var) -> Var:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", a.value + b.value, (a, b),
                         lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", a.value - b.value, (a, b),
                         lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Var, b: Var) -> Var:
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b), lambda g, n: (
        _unbroadcast(g * bv, av.shape) if n[0] else None,
        _unbroadcast(g * av, bv.shape) if n[1] else None,
    ))


def div(a: Var, b: Var) -> Var:
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record("div", out, (a, b), lambda g, n: (
        _unbroadcast(g / bv, av.shape) if n[0] else None,
        _unbroadcast(-g * out / bv, bv.shape) if n[1] else None,
    ))


def neg(a: Var) -> Var:
    return a.tape.record("neg", -a.value, (a,), lambda g, n: (-g,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g, n: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0):
        raise NumericError("log of non-positive value")
    return a.tape.record("log", np.log(av), (a,), lambda g, n: (g / av,))


def abs_(a: Var) -> Var:
    av = a.value
    return a.tape.record("abs", np.abs(av), (a,), lambda g, n: (g * np.sign(av),))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record("square", av * av, (a,), lambda g, n: (2 * g * av,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", out, (a,), lambda g, n: (g / (2 * out),))


def relu(a: Var) -> Var:
    av = a.value
    return a.tape.record("relu", np.maximum(av, 0), (a,), lambda g, n: (g * (av > 0),))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record("sigmoid", out, (a,), lambda g, n: (g * out * (1 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record("tanh", out, (a,), lambda g, n: (g * (1 - out * out),))


def clamp(a: Var, lo: float, hi: float) -> Var:
    """Clip to ``[lo, hi]``; gradient passes unchanged inside the bounds, zero outside."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.tape.record("clamp", np.clip(av, lo, hi), (a,), lambda g, n: (g * inside,))


def stop_gradient(a: Var) -> Var:
    return a.tape.const(a.value)


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.value, axis=axes, keepdims=keepdims)

    def bw(g, n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record("sum", np.asarray(out), (a,), bw)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def _extreme(a: Var, axis, keepdims: bool, pick) -> Var:
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = np.transpose(a.value, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = pick(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = a.shape
    if keepdims:
        out = np.expand_dims(out, axes)

    def bw(g, n):
        g = g.reshape(lead)
        gf = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(perm)).reshape(shape),)

    return a.tape.record("extreme", np.asarray(out), (a,), bw)


def amax(a: Var, axis=None, keepdims: bool = False) -> Var:
    """Maximum; the gradient goes to the first maximal element."""
    return _extreme(a, axis, keepdims, np.argmax)


def amin(a: Var, axis=None, keepdims: bool = False) -> Var:
    return _extreme(a, axis, keepdims, np.argmin)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return a.tape.record("reshape", out, (a,), lambda g, n: (g.reshape(old),))


def transpose(a: Var, axes=None) -> Var:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return a.tape.record("transpose", np.transpose(a.value, axes), (a,),
                         lambda g, n: (np.transpose(g, inv),))


def index(a: Var, idx) -> Var:
    shape = a.shape

    def bw(g, n):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record("index", np.array(a.value[idx]), (a,), bw)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return parts[0].tape.record("concat", out, tuple(parts),
                                lambda g, n: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")

    def bw(g, n):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if n[0] else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if n[1] else None
        return ga, gb

    return a.tape.record("matmul", av @ bv, (a, b), bw)


def linear(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = matmul(x, transpose(weight))
    return y + bias if bias is not None else y


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, n):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a.tape.record("softmax", out, (a,), bw)


def log_softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g, n):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return a.tape.record("log_softmax", out, (a,), bw)


# ---------------------------------------------------------------- convolution & pooling


def conv2d(x: Var, weight: Var, bias: Var | None = None, stride: int = 1, padding: int = 0) -> Var:
    """2-D cross-correlation, NCHW input and OIKK weight."""
    xv, wv = x.value, weight.value
    if xv.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got rank {xv.ndim}")
    if wv.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OIKK, got rank {wv.ndim}")
    N, C, H, W = xv.shape
    O, I, KH, KW = wv.shape
    if C != I:
        raise ShapeError(f"conv2d: input channels {C} != weight in-channels {I}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias length {bias.shape} != out-channels {O}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < KH:
        raise ShapeError(f"conv2d: padded height {Hp} < kernel height {KH}")
    if Wp < KW:
        raise ShapeError(f"conv2d: padded width {Wp} < kernel width {KW}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    Ho, Wo = (Hp - KH) // stride + 1, (Wp - KW) // stride + 1
    # column buffer (N, C, KH, KW, Ho, Wo) -> (N, C*KH*KW, Ho*Wo)
    cols = np.empty((N, C, KH, KW, Ho, Wo), dtype=xv.dtype)
    for i in range(KH):
        for j in range(KW):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(N, C * KH * KW, Ho * Wo)
    wmat = wv.reshape(O, C * KH * KW)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.value[None, :, None]
    out = out.reshape(N, O, Ho, Wo)

    def bw(g, n):
        gx = gw = gb = None
        g3 = g.reshape(N, O, Ho * Wo)
        if n[0]:
            gcols = np.matmul(wmat.T, g3).reshape(N, C, KH, KW, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if n[1]:
            acc = g3[0] @ cols[0].T
            for k in range(1, N):
                acc += g3[k] @ cols[k].T
            gw = acc.reshape(O, C, KH, KW)
        if len(n) > 2 and n[2]:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x.tape.record("conv2d", out, parents, bw)


def _pool_check(op: str, x: Var) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got rank {x.ndim}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op}: spatial dims {x.shape[2:]} must be even")


def max_pool2(x: Var) -> Var:
    _pool_check("max_pool2", x)
    N, C, H, W = x.shape
    blocks = x.value.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g, n):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W),)

    return x.tape.record("max_pool2", out, (x,), bw)


def avg_pool2(x: Var) -> Var:
    _pool_check("avg_pool2", x)
    N, C, H, W = x.shape
    out = x.value.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g, n):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return x.tape.record("avg_pool2", out, (x,), bw)


def global_avg_pool(x: Var) -> Var:
    """NCHW -> NC."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be NCHW, got rank {x.ndim}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- normalization


def batch_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None) -> Var:
    """Per-channel normalization of NCHW input.

    Uses batch statistics unless running statistics are supplied (inference).
    """
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must have length {C}")
    xv = x.value
    bshape = (1, C) + (1,) * (xv.ndim - 2)
    axes = (0,) + tuple(range(2, xv.ndim))
    if running_mean is None:
        x64 = xv.astype(np.float64)
        mu = x64.mean(axis=axes, keepdims=True).astype(xv.dtype)
        var = x64.var(axis=axes, keepdims=True).astype(xv.dtype)
        training = True
    else:
        mu = np.asarray(running_mean, dtype=xv.dtype).reshape(bshape)
        var = np.asarray(running_var, dtype=xv.dtype).reshape(bshape)
        training = False
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value.reshape(bshape)
    out = gv * xhat + beta.value.reshape(bshape)
    m = xv.size // C

    def bw(g, n):
        gg = (g * xhat).sum(axis=axes) if n[1] else None
        gbeta = g.sum(axis=axes) if n[2] else None
        gx = None
        if n[0]:
            gxhat = g * gv
            if training:
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv
        return gx, gg, gbeta

    return x.tape.record("batch_norm", out, (x, gamma, beta), bw)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis."""
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma length {gamma.shape} != features {x.shape[-1]}")
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------- resampling


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights with half-pixel centers (corners not aligned)."""
    A = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        A[i, i0] += 1 - t
        A[i, i1] += t
    return A


def bilinear_resize(x: Var, out_h: int, out_w: int) -> Var:
    """Bilinear resampling of the last two axes."""
    if x.ndim < 2:
        raise ShapeError("bilinear_resize: needs at least 2 dims")
    H, W = x.shape[-2:]
    Ah = interp_matrix(out_h, H).astype(x.value.dtype)
    Aw = interp_matrix(out_w, W).astype(x.value.dtype)
    out = Ah @ x.value @ Aw.T
    return x.tape.record("bilinear_resize", out, (x,), lambda g, n: (Ah.T @ g @ Aw,))
