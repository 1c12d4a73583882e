"""Checkpoint container: bit-exact round trips and corruption detection."""

import numpy as np
import pytest

from promptcl import rng
from promptcl.checkpoint import (
    MAGIC, CheckpointError, config_hash, load_checkpoint, save_checkpoint,
)


def sample_arrays():
    gen = rng.stream(0, "test.ckpt")
    return {
        "alpha": gen.normal(0, 1, (3, 4)),
        "beta/gamma": gen.normal(0, 1, (2, 2, 2)),
        "scalar": np.array(3.5),
    }


def test_round_trip_is_bit_exact(tmp_path):
    path = tmp_path / "a.ckpt"
    arrays = sample_arrays()
    save_checkpoint(path, arrays, {"kind": "test", "note": "hello"})
    loaded, manifest = load_checkpoint(path)
    assert manifest["kind"] == "test" and manifest["note"] == "hello"
    assert manifest["version"] == 1
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].shape == arrays[name].shape
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_reserialization_is_byte_identical(tmp_path):
    arrays = sample_arrays()
    save_checkpoint(tmp_path / "a.ckpt", arrays, {"kind": "test"})
    loaded, _ = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded, {"kind": "test"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPTxxxx")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"a": np.ones(2)}, {"kind": "test"})
    raw = path.read_bytes().replace(b'"version":1', b'"version":9', 1)
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(path)


def test_corrupt_array_names_the_array(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, sample_arrays(), {"kind": "test"})
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF  # flip a byte inside the last array's payload
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="scalar"):
        load_checkpoint(path)


def test_truncation_names_the_array(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, sample_arrays(), {"kind": "test"})
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, sample_arrays(), {"kind": "test"})
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_magic_is_eight_bytes():
    assert len(MAGIC) == 8


def test_config_hash_stable_and_sensitive():
    a = config_hash("x = 1\n")
    assert a == config_hash("x = 1\n") and len(a) == 16
    assert a != config_hash("x = 2\n")
