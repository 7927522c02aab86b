"""Named parameter collections, the ``TXGW`` weight file, and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tape, Var, get_dtype

SCHEMA_VERSION = 1
MAGIC = b"TXGW"

# Entries with these suffixes/prefixes are statistics or metadata, not trained weights.
BUFFER_SUFFIXES = (".running_mean", ".running_var")
META_PREFIX = "meta."


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES) or name.startswith(META_PREFIX)


class WeightFileError(ValueError):
    pass


class WeightFormatError(WeightFileError):
    """Bad magic bytes."""


class WeightVersionError(WeightFileError):
    """Unsupported schema version."""


class WeightTruncatedError(WeightFileError):
    """File ended before all declared data was read."""


class ModelParams(Mapping[str, np.ndarray]):
    """Ordered (lexicographic) mapping of parameter name to array."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, schema_version: int = SCHEMA_VERSION):
        self._entries: dict[str, np.ndarray] = {}
        self.schema_version = schema_version
        for k, v in (entries or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value) -> None:
        self._entries[name] = np.array(value, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} entries, {self.count()} scalars)"

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self._entries.items()}, self.schema_version)

    def count(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else list(self)
        return int(sum(self[k].size for k in names))

    def trainable_names(self) -> list[str]:
        return [k for k in self if not is_buffer(k)]

    def subset(self, prefix: str) -> "ModelParams":
        return ModelParams({k: v for k, v in self._entries.items() if k.startswith(prefix)})

    def equal(self, other: "ModelParams") -> bool:
        """Bit-identical comparison."""
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Var]:
        """Register every entry as a tape leaf in the working precision."""
        dt = get_dtype()
        return {k: tape.leaf(self[k].astype(dt), requires_grad=trainable and not is_buffer(k))
                for k in self}


def grads_of(tape_grads: dict[int, np.ndarray], bound: Mapping[str, Var],
             names: list[str] | None = None) -> dict[str, np.ndarray]:
    """Pick named parameter gradients out of a tape gradient table."""
    names = names if names is not None else [k for k, v in bound.items() if v.tape.nodes[v.id].requires_grad]
    return {k: tape_grads.get(bound[k].id, np.zeros_like(bound[k].value)) for k in names}


# ---------------------------------------------------------------- weight file


def save_params(params: ModelParams, path) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<BI", params.schema_version, len(params))
    for name in params:
        arr = np.asarray(params[name], dtype="<f4")  # tobytes() is C-order; keeps 0-d shape
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightTruncatedError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightFormatError(f"{path}: not a TXGW weight file")
    (version,) = struct.unpack("<B", take(1))
    if version != SCHEMA_VERSION:
        raise WeightVersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        entries[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise WeightFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(entries, version)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState,
                   lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every trainable entry.

    Buffers (running statistics) are carried over untouched.
    """
    trainable = params.trainable_names()
    missing = [k for k in trainable if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for {missing[0]!r}")
    extra = [k for k in grads if k not in params or k not in trainable]
    if extra:
        raise KeyError(f"gradient for unknown parameter {extra[0]!r}")

    t = state.step + 1
    new = params.copy()
    m, v = dict(state.m), dict(state.v)
    for k in trainable:
        g = np.asarray(grads[k], dtype=np.float64)
        mk = beta1 * m.get(k, 0.0) + (1 - beta1) * g
        vk = beta2 * v.get(k, 0.0) + (1 - beta2) * g * g
        m[k], v[k] = mk, vk
        mhat = mk / (1 - beta1 ** t)
        vhat = vk / (1 - beta2 ** t)
        new[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(t, m, v)
