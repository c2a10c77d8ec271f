import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osaq.errors import ArchiveError, MalformedHeader, NameCollision, NonFinite, TruncatedPayload, UnknownDtype
from osaq.tensorstore import MAGIC, archive_read, archive_write, decode, encode


def _header(data):
    (hlen,) = struct.unpack("<Q", data[8:16])
    return json.loads(data[16:16 + hlen]), 16 + hlen


def _rebuild(header, payload):
    raw = json.dumps(header, sort_keys=True).encode()
    raw += b" " * ((-(16 + len(raw))) % 8)
    return MAGIC + struct.pack("<Q", len(raw)) + raw + payload


def test_empty_archive(tmp_path):
    archive_write(tmp_path / "e.osaq", {})
    data = (tmp_path / "e.osaq").read_bytes()
    assert data.startswith(MAGIC)
    assert archive_read(tmp_path / "e.osaq").tensors == {}
    assert len(data) % 8 == 0


def test_round_trip_small(tmp_path):
    w = np.array([[1.5, -2.0], [0.25, 4.0]], dtype=np.float32)
    archive_write(tmp_path / "a.osaq", {"w": w})
    got = archive_read(tmp_path / "a.osaq")["w"]
    assert got.dtype == np.float32
    np.testing.assert_array_equal(got, w)


def test_round_trip_fuzz(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {}
    for i in range(50):
        shape = tuple(int(d) for d in rng.integers(0, 6, size=int(rng.integers(0, 4))))
        kind = i % 4
        if kind == 0:
            tensors[f"t{i}"] = rng.standard_normal(shape).astype(np.float32)
        elif kind == 1:
            tensors[f"t{i}"] = rng.standard_normal(shape)
        elif kind == 2:
            tensors[f"t{i}"] = rng.integers(-1000, 1000, shape).astype(np.int32)
        else:
            tensors[f"t{i}"] = rng.integers(0, 256, shape).astype(np.uint8)
    archive_write(tmp_path / "f.osaq", tensors)
    got = archive_read(tmp_path / "f.osaq")
    for name, arr in tensors.items():
        assert got[name].dtype == arr.dtype
        assert got[name].tobytes() == arr.tobytes()


def test_write_is_deterministic_and_idempotent(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"b": rng.standard_normal((3, 4)).astype(np.float32), "a": np.arange(5, dtype=np.int32)}
    archive_write(tmp_path / "1.osaq", tensors, {"k": "v"})
    archive_write(tmp_path / "2.osaq", dict(reversed(list(tensors.items()))), {"k": "v"})
    b1, b2 = (tmp_path / "1.osaq").read_bytes(), (tmp_path / "2.osaq").read_bytes()
    assert b1 == b2
    again = archive_read(tmp_path / "1.osaq")
    assert encode(again.tensors, again.metadata) == b1


def test_offsets_aligned_and_ascending():
    data = encode({"x": np.zeros(3, np.uint8), "y": np.zeros(5, np.float32), "z": np.zeros((2, 2))})
    header, start = _header(data)
    assert start % 8 == 0
    offsets = [header[k]["offset"] for k in sorted(header)]
    assert offsets == sorted(offsets)
    assert all(o % 8 == 0 for o in offsets)


def test_forced_dtype():
    data = encode({"w": np.ones((2, 2))}, dtype="f32")
    assert decode(data)["w"].dtype == np.float32


def test_truncated_payload():
    data = encode({"w": np.ones((4, 4), np.float32)})
    with pytest.raises(TruncatedPayload):
        decode(data[:-8])


def test_length_beyond_file():
    data = encode({"w": np.ones(2, np.float32)})
    header, start = _header(data)
    header["w"]["offset"] = 64
    with pytest.raises(TruncatedPayload):
        decode(_rebuild(header, data[start:]))


def test_overlapping_offsets():
    data = encode({"a": np.ones(4, np.float32), "b": np.ones(4, np.float32)})
    header, start = _header(data)
    header["b"]["offset"] = 8
    with pytest.raises(MalformedHeader):
        decode(_rebuild(header, data[start:]))


def test_bad_magic_and_dtype():
    data = encode({"a": np.ones(2, np.float32)})
    with pytest.raises(MalformedHeader):
        decode(b"NOTOSAQ!" + data[8:])
    header, start = _header(data)
    header["a"]["dtype"] = "f16"
    with pytest.raises(UnknownDtype):
        decode(_rebuild(header, data[start:]))


def test_nbytes_must_match_shape():
    data = encode({"a": np.ones(4, np.float32)})
    header, start = _header(data)
    header["a"]["shape"] = [3]
    with pytest.raises(MalformedHeader):
        decode(_rebuild(header, data[start:]))


def test_write_errors(tmp_path):
    with pytest.raises(NonFinite):
        archive_write(tmp_path / "x.osaq", {"w": np.array([np.inf], np.float32)})
    with pytest.raises(MalformedHeader):
        archive_write(tmp_path / "x.osaq", {"": np.zeros(1)})
    with pytest.raises(MalformedHeader):
        archive_write(tmp_path / "x.osaq", {"n" * 300: np.zeros(1)})
    with pytest.raises(NameCollision):
        archive_write(tmp_path / "x.osaq", {"__metadata__": np.zeros(1)}, {"a": "b"})
    assert not list(tmp_path.glob("*.tmp"))


def _valid_archive():
    rng = np.random.default_rng(2)
    return encode({"w": rng.standard_normal((3, 3)).astype(np.float32), "c": np.arange(4, dtype=np.uint8)}, {"m": "1"})


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 255))
def test_header_corruption_is_safe(pos, value):
    data = bytearray(_valid_archive())
    _, start = _header(bytes(data))
    data[pos % start] = value
    try:
        arc = decode(bytes(data))
    except ArchiveError:
        return
    for name, arr in arc.tensors.items():
        assert name and len(name.encode()) <= 256
        assert isinstance(arr, np.ndarray)
