import numpy as np
import pytest

from pvit.checkpoint import MAGIC, Checkpoint, config_hash, load_checkpoint, save_checkpoint
from pvit.errors import FormatError


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "enc/w": rng.standard_normal((3, 4)).astype(np.float32),
        "enc/b": rng.standard_normal(4),
        "ids": np.array([1, 5, 9], dtype=np.int64),
        "bytes": np.array([0, 128, 255], dtype=np.uint8),
    }


def test_round_trip_exact(tmp_path):
    path = tmp_path / "x.pvit"
    tensors = sample_tensors()
    save_checkpoint(path, tensors, config_hash="abc", epoch=7, step=123, rng_state={"seed": 3})
    ckpt = load_checkpoint(path)
    assert set(ckpt.tensors) == set(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[name], arr)
        assert ckpt.tensors[name].dtype == arr.dtype
    assert (ckpt.config_hash, ckpt.epoch, ckpt.step) == ("abc", 7, 123)
    assert ckpt.rng_state == {"seed": 3}


def test_magic_and_version(tmp_path):
    path = tmp_path / "x.pvit"
    save_checkpoint(path, sample_tensors())
    raw = path.read_bytes()
    assert raw[:8] == MAGIC == b"PVITCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.pvit", tmp_path / "b.pvit"
    save_checkpoint(a, sample_tensors(), epoch=1)
    save_checkpoint(b, sample_tensors(), epoch=1)
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.pvit"
    path.write_bytes(b"NOTPVITC" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.pvit"
    good = tmp_path / "good.pvit"
    save_checkpoint(good, sample_tensors())
    raw = bytearray(good.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    good = tmp_path / "good.pvit"
    save_checkpoint(good, sample_tensors())
    (tmp_path / "cut.pvit").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(FormatError, match="payload"):
        load_checkpoint(tmp_path / "cut.pvit")


def test_header_records_entry_metadata(tmp_path):
    import json
    import struct

    path = tmp_path / "x.pvit"
    save_checkpoint(path, {"a": np.zeros((2, 3), dtype=np.float32), "b": np.ones(5)})
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 12)
    header = json.loads(raw[16 : 16 + hlen])
    entries = {e["name"]: e for e in header["entries"]}
    assert entries["a"]["shape"] == [2, 3] and entries["a"]["dtype"] == "float32"
    assert entries["a"]["byte_length"] == 24
    assert entries["b"]["byte_offset"] == 24  # packed back to back
    assert entries["b"]["dtype"] == "float64"


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(FormatError, match="dtype"):
        save_checkpoint(tmp_path / "x.pvit", {"c": np.zeros(3, dtype=np.complex128)})


def test_config_hash_stable_and_order_independent():
    h1 = config_hash({"a": 1, "b": {"c": [1, 2]}})
    h2 = config_hash({"b": {"c": [1, 2]}, "a": 1})
    assert h1 == h2
    assert h1 != config_hash({"a": 2, "b": {"c": [1, 2]}})
