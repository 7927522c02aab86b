"""Parameter initialisation and composite layers shared by the models."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .params import ModelParams
from .tensor import Var

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def init_conv(params: ModelParams, rng: np.random.Generator, name: str, cin: int, cout: int, k: int = 3,
              bias: bool = True) -> None:
    std = np.sqrt(2.0 / (cin * k * k))
    params[f"{name}.weight"] = rng.normal(0.0, std, size=(cout, cin, k, k))
    if bias:
        params[f"{name}.bias"] = np.zeros(cout)


def init_linear(params: ModelParams, rng: np.random.Generator, name: str, fin: int, fout: int) -> None:
    bound = 1.0 / np.sqrt(fin)
    params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fout, fin))
    params[f"{name}.bias"] = np.zeros(fout)


def init_norm(params: ModelParams, name: str, c: int, running: bool = False) -> None:
    params[f"{name}.gamma"] = np.ones(c)
    params[f"{name}.beta"] = np.zeros(c)
    if running:
        params[f"{name}.running_mean"] = np.zeros(c)
        params[f"{name}.running_var"] = np.ones(c)


def init_conv_block(params: ModelParams, rng: np.random.Generator, name: str, cin: int, cout: int) -> None:
    """3x3 conv (no bias, BN supplies the shift) + batch norm."""
    init_conv(params, rng, f"{name}.conv", cin, cout, 3, bias=False)
    init_norm(params, f"{name}.bn", cout, running=True)


def conv_block(p: Mapping[str, Var], name: str, x: Var, training: bool = False,
               bn_stats: dict[str, np.ndarray] | None = None, pad_mode: str = "zeros") -> Var:
    """Conv3x3 -> BatchNorm -> ReLU.

    In training mode batch statistics are used and, when ``bn_stats`` is given,
    the updated running statistics are written into it.
    """
    if pad_mode == "edge":
        x = pad_edge(x, 1)
        h = T.conv2d(x, p[f"{name}.conv.weight"], None, 1, 0)
    else:
        h = T.conv2d(x, p[f"{name}.conv.weight"], None, 1, 1)
    rm, rv = f"{name}.bn.running_mean", f"{name}.bn.running_var"
    if training:
        h_n = T.batch_norm(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], BN_EPS)
        if bn_stats is not None:
            hv = h.value.astype(np.float64)
            n = hv.size // hv.shape[1]
            mu = hv.mean(axis=(0, 2, 3))
            var = hv.var(axis=(0, 2, 3)) * n / max(n - 1, 1)
            bn_stats[rm] = (1 - BN_MOMENTUM) * p[rm].value + BN_MOMENTUM * mu
            bn_stats[rv] = (1 - BN_MOMENTUM) * p[rv].value + BN_MOMENTUM * var
    else:
        h_n = T.batch_norm(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], BN_EPS,
                           p[rm].value, p[rv].value)
    return T.relu(h_n)


def pad_edge(x: Var, k: int) -> Var:
    """Edge-replicating spatial pad of an NCHW variable (differentiable)."""
    H, W = x.shape[2:]
    rows = np.clip(np.arange(-k, H + k), 0, H - 1)
    cols = np.clip(np.arange(-k, W + k), 0, W - 1)
    return T.index(x, (slice(None), slice(None), rows[:, None], cols[None, :]))


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``labels``."""
    lp = T.log_softmax(logits, axis=-1)
    picked = lp[np.arange(len(labels)), np.asarray(labels)]
    return -T.mean(picked)


TRAINED_KEY = "meta.trained_epochs"


def mark_trained(params: ModelParams, epochs: int) -> ModelParams:
    out = params.copy()
    prev = float(params[TRAINED_KEY][0]) if TRAINED_KEY in params else 0.0
    out[TRAINED_KEY] = np.array([prev + epochs])
    return out


def is_trained(params: ModelParams) -> bool:
    return TRAINED_KEY in params and float(params[TRAINED_KEY][0]) > 0


def apply_bn_stats(params: ModelParams, bn_stats: Mapping[str, np.ndarray]) -> ModelParams:
    out = params.copy()
    for k, v in bn_stats.items():
        out[k] = v
    return out
