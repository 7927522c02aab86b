import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from texguard.params import (SCHEMA_VERSION, AdamState, ModelParams, WeightFormatError, WeightTruncatedError,
                             WeightVersionError, load_params, optimizer_step, save_params)


def test_zero_gradient_keeps_params():
    p = ModelParams({"w": [1.0, -2.0]})
    new, _ = optimizer_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert new.equal(p)


def test_single_step_moves_by_lr():
    # bias-corrected m/sqrt(v) is exactly 1 after one step with g=1
    p = ModelParams({"w": [0.5]})
    new, state = optimizer_step(p, {"w": np.ones(1)}, AdamState(), lr=0.1)
    assert new["w"][0] == pytest.approx(0.5 - 0.1, abs=1e-6)
    assert state.step == 1


def test_constant_gradient_monotone():
    p = ModelParams({"w": [0.0]})
    state = AdamState()
    xs = [0.0]
    for _ in range(2):
        p, state = optimizer_step(p, {"w": np.array([-3.0])}, state, lr=0.01)
        xs.append(float(p["w"][0]))
    assert xs[0] < xs[1] < xs[2]


def test_buffers_untouched_and_required_grads():
    p = ModelParams({"bn.running_mean": [1.0], "w": [1.0]})
    new, _ = optimizer_step(p, {"w": np.ones(1)}, AdamState(), lr=0.1)
    assert new["bn.running_mean"][0] == 1.0
    with pytest.raises(KeyError):
        optimizer_step(p, {}, AdamState())
    with pytest.raises(KeyError):
        optimizer_step(p, {"w": np.ones(1), "bn.running_mean": np.ones(1)}, AdamState())


def test_iteration_is_lexicographic():
    p = ModelParams({"b": [1.0], "a.z": [2.0], "a.b": [3.0]})
    assert list(p) == ["a.b", "a.z", "b"]


def test_round_trip(tmp_path, rng):
    p = ModelParams({"conv.weight": rng.normal(size=(4, 3, 3, 3)), "scalar": np.float32(2.5), "v": rng.normal(size=7)})
    save_params(p, tmp_path / "w.txgw")
    q = load_params(tmp_path / "w.txgw")
    assert q.equal(p) and q.schema_version == SCHEMA_VERSION


def test_bad_magic(tmp_path):
    path = tmp_path / "w.txgw"
    save_params(ModelParams({"a": [1.0]}), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFormatError):
        load_params(path)


def test_newer_version(tmp_path):
    path = tmp_path / "w.txgw"
    save_params(ModelParams({"a": [1.0]}), path)
    data = bytearray(path.read_bytes())
    data[4] = SCHEMA_VERSION + 1
    path.write_bytes(bytes(data))
    with pytest.raises(WeightVersionError):
        load_params(path)


def test_truncated(tmp_path):
    path = tmp_path / "w.txgw"
    save_params(ModelParams({"a": np.arange(10.0)}), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(WeightTruncatedError):
        load_params(path)


def test_header_layout(tmp_path):
    path = tmp_path / "w.txgw"
    save_params(ModelParams({"a": [1.0, 2.0]}), path)
    data = path.read_bytes()
    assert data[:4] == b"TXGW"
    assert struct.unpack("<BI", data[4:9]) == (SCHEMA_VERSION, 1)


names = st.text(alphabet="abcdefghij._", min_size=1, max_size=12)
tensors = arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
                 elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(names, tensors, min_size=1, max_size=5))
def test_round_trip_property(tmp_path_factory, entries):
    path = tmp_path_factory.mktemp("w") / "p.txgw"
    p = ModelParams(entries)
    save_params(p, path)
    assert load_params(path).equal(p)
    # saving the loaded copy reproduces the file byte for byte
    path2 = path.with_name("q.txgw")
    save_params(load_params(path), path2)
    assert path2.read_bytes() == path.read_bytes()
