import json
import struct

import pytest
import torch

from jointsr import serialization as ser


def sample():
    return {"a": torch.arange(6.0).reshape(2, 3), "b": torch.tensor([0.5])}


def test_round_trip_and_stable_bytes(tmp_path):
    blob = ser.encode(sample(), "test", {"x": 1})
    assert blob == ser.encode(sample(), "test", {"x": 1})
    header, tensors = ser.decode(blob)
    assert header["kind"] == "test" and header["meta"] == {"x": 1}
    assert list(tensors) == ["a", "b"] and torch.equal(tensors["a"], sample()["a"])
    ser.save(tmp_path / "f.bin", sample(), "test")
    assert ser.load(tmp_path / "f.bin", kind="test")[1]["b"].item() == 0.5


def rewrite_header(blob, **changes):
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    header.update(changes)
    h = json.dumps(header).encode()
    return blob[:4] + struct.pack("<I", len(h)) + h + blob[8 + hlen:]


def test_version_mismatch():
    blob = rewrite_header(ser.encode(sample(), "test"), version=99)
    with pytest.raises(ser.IncompatibleVersionError, match="99"):
        ser.decode(blob)


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-4],
    lambda b: b[:12],
    lambda b: b[:8] + b"!" + b[9:],
])
def test_corrupt_blobs_rejected(mangle):
    with pytest.raises(ser.ContainerError):
        ser.decode(mangle(ser.encode(sample(), "test")))


def test_non_finite_payload_rejected():
    with pytest.raises(ser.ContainerError):
        ser.decode(ser.encode({"a": torch.tensor([float("nan")])}, "test"))


def test_kind_and_missing_file(tmp_path):
    ser.save(tmp_path / "f.bin", sample(), "test")
    with pytest.raises(ser.ContainerError, match="expected"):
        ser.load(tmp_path / "f.bin", kind="checkpoint")
    with pytest.raises(ser.ContainerError):
        ser.load(tmp_path / "missing.bin")
