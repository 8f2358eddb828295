"""Module tree naming, state round-trips, and the SPT1 checkpoint format."""

import struct

import numpy as np
import pytest

from serpentseg.module import (
    CheckpointError,
    Conv2d,
    Linear,
    Module,
    ModuleList,
    Parameter,
    load_checkpoint,
    save_checkpoint,
)
from serpentseg.tensor import ContractViolation, Tensor


class _Net(Module):
    def __init__(self, rng):
        super().__init__()
        self.stem = Conv2d(1, 2, 3, padding=1, rng=rng)
        self.blocks = ModuleList([Linear(4, 4, rng=rng) for _ in range(2)])
        self.scale = Parameter(np.ones(2, dtype=np.float32))


def test_parameter_names_are_path_like_and_unique():
    net = _Net(np.random.default_rng(0))
    names = [n for n, _ in net.named_parameters()]
    assert "stem.weight" in names
    assert "blocks.0.weight" in names
    assert "blocks.1.bias" in names
    assert "scale" in names
    assert len(names) == len(set(names))


def test_state_dict_round_trip_preserves_values_and_names():
    net = _Net(np.random.default_rng(1))
    state = net.state_dict()
    other = _Net(np.random.default_rng(2))
    other.load_state_dict(state)
    for name, p in other.named_parameters():
        np.testing.assert_array_equal(p.data, state[name])
    assert sorted(state) == sorted(n for n, _ in other.named_parameters())


def test_load_rejects_shape_mismatch_naming_tensor():
    net = _Net(np.random.default_rng(3))
    state = net.state_dict()
    state["stem.weight"] = np.zeros((2, 1, 5, 5), dtype=np.float32)
    with pytest.raises(ContractViolation, match="stem.weight"):
        net.load_state_dict(state)


def test_load_rejects_missing_keys():
    net = _Net(np.random.default_rng(4))
    state = net.state_dict()
    del state["scale"]
    with pytest.raises(ContractViolation, match="scale"):
        net.load_state_dict(state)


class TestCheckpointFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        state = {
            "b.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(7).astype(np.float32),
            "c": np.float32(rng.standard_normal(())).reshape(()),
        }
        path = tmp_path / "model.spt"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
        assert sorted(loaded) == sorted(state)
        for k in state:
            assert loaded[k].dtype == np.float32
            np.testing.assert_array_equal(loaded[k], state[k].astype(np.float32))

    def test_entries_sorted_by_name(self, tmp_path):
        path = tmp_path / "m.spt"
        save_checkpoint(path, {"zz": np.zeros(1, np.float32), "aa": np.ones(1, np.float32)})
        blob = path.read_bytes()
        assert blob[:4] == b"SPT1"
        (count,) = struct.unpack("<I", blob[4:8])
        assert count == 2
        (nlen,) = struct.unpack("<I", blob[8:12])
        assert blob[12:12 + nlen] == b"aa"  # lexicographically first entry leads

    def test_layout_matches_format_spec(self, tmp_path):
        path = tmp_path / "one.spt"
        arr = np.array([[1.5, -2.0]], dtype=np.float32)
        save_checkpoint(path, {"w": arr})
        expected = (
            b"SPT1"
            + struct.pack("<I", 1)
            + struct.pack("<I", 1) + b"w"
            + struct.pack("<I", 2)
            + struct.pack("<II", 1, 2)
            + arr.astype("<f4").tobytes()
        )
        assert path.read_bytes() == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.spt"
        save_checkpoint(path, {"w": np.ones((2, 2), dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-6])
        with pytest.raises(CheckpointError, match="byte"):
            load_checkpoint(path)

    def test_save_load_forward_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        net = _Net(rng)
        x = Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32))
        before = net.stem(x).data.copy()
        path = tmp_path / "net.spt"
        save_checkpoint(path, net.state_dict())
        fresh = _Net(np.random.default_rng(99))
        fresh.load_state_dict(load_checkpoint(path))
        after = fresh.stem(x).data
        assert np.array_equal(before, after)


def test_zero_grad_clears():
    net = _Net(np.random.default_rng(7))
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    net.stem(x).sum().backward()
    assert net.stem.weight.grad is not None
    net.zero_grad()
    assert all(p.grad is None for p in net.parameters())
