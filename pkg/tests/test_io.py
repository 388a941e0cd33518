import json
import struct

import numpy as np
import pytest

from hlqkit.errors import CorruptContainerError, DataError
from hlqkit.io import (
    MAGIC, VERSION, QuantizedModel, decode_hlqp, encode_hlqp, load_hlqp, read_raw, save_hlqp,
    sidecar_path, write_raw,
)
from hlqkit.lut import decompose_bitplanes, mirror_transform, rearrange_tiles
from hlqkit.quant import HlqParams, hlq_dequantize


def make_model(rng, n=20, k=96, q=3, g=32, mirrored=False, fmt="hlq"):
    bits = rng.integers(0, 1 << q, size=(n, k)).astype(np.uint8)
    params = HlqParams(rng.uniform(0.001, 0.02, size=(n, k // g, q)),
                       rng.normal(0, 0.01, size=(n, k // g)), q, g)
    packed = rearrange_tiles(decompose_bitplanes(bits, q), g)
    return QuantizedModel(packed, mirror_transform(params) if mirrored else params, fmt), bits, params


def assert_same(a: QuantizedModel, b: QuantizedModel):
    np.testing.assert_array_equal(a.packed.words, b.packed.words)
    assert a.packed.header() == b.packed.header()
    assert a.format == b.format and a.mirrored == b.mirrored
    for name in ("scales", "zeros", "scales_hat", "zeros_hat"):
        if hasattr(a.params, name):
            np.testing.assert_array_equal(getattr(a.params, name), getattr(b.params, name))


@pytest.mark.parametrize("layout", ["tiles", "planes"])
@pytest.mark.parametrize("mirrored", [False, True])
def test_roundtrip(tmp_path, rng, layout, mirrored):
    model, bits, params = make_model(rng, mirrored=mirrored, fmt="uniform" if mirrored else "hlq")
    path = tmp_path / "m.hlqp"
    save_hlqp(path, model, layout=layout)
    back = load_hlqp(path)
    assert_same(model, back)
    np.testing.assert_array_equal(back.bits(), bits)
    np.testing.assert_allclose(back.dequantize(), hlq_dequantize(bits, params), atol=1e-6)
    header = json.loads(path.read_bytes()[12:12 + struct.unpack("<I", path.read_bytes()[8:12])[0]])
    assert header["layout"] == layout and header["gA"] == 4 and header["pad_n"] == 12


def test_prefix_layout(rng):
    model, _, _ = make_model(rng)
    data = encode_hlqp(model)
    magic, version, hlen = struct.unpack("<4sII", data[:12])
    assert magic == MAGIC == b"HLQP" and version == VERSION == 1
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    assert {"n", "k", "q", "g", "gA", "format", "layout", "mirrored", "pad_n", "pad_k"} <= header.keys()
    words = model.packed.words.size
    assert len(data) == 12 + hlen + 8 * words + 4 * 20 * 3 * 3 + 4 * 20 * 3


@pytest.mark.parametrize("section,cut", [
    ("prefix", 6), ("header", 20), ("planes", 0), ("scales", 0), ("zeros", 0),
])
def test_truncation_names_section(rng, section, cut):
    model, _, _ = make_model(rng)
    data = encode_hlqp(model)
    hlen = struct.unpack("<I", data[8:12])[0]
    words = 8 * model.packed.words.size
    ends = {"planes": 12 + hlen + words - 3, "scales": 12 + hlen + words + 5, "zeros": len(data) - 1}
    data = data[: ends.get(section, cut)]
    with pytest.raises(CorruptContainerError, match=f"corrupt container.*'{section}'"):
        decode_hlqp(data)


def test_wrong_magic(rng):
    model, _, _ = make_model(rng)
    data = b"NOPE" + encode_hlqp(model)[4:]
    with pytest.raises(CorruptContainerError, match="not an HLQP"):
        decode_hlqp(data)
    with pytest.raises(CorruptContainerError, match="not an HLQP"):
        decode_hlqp(b"NOPE" + bytes(8))


def test_unknown_version(rng):
    model, _, _ = make_model(rng)
    data = bytearray(encode_hlqp(model))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CorruptContainerError, match="unsupported container version 2"):
        decode_hlqp(bytes(data))


def test_trailing_bytes(rng):
    model, _, _ = make_model(rng)
    with pytest.raises(CorruptContainerError, match="trailing"):
        decode_hlqp(encode_hlqp(model) + b"\0")


def test_encode_rejects_mismatch(rng):
    model, _, _ = make_model(rng)
    other, _, _ = make_model(rng, q=2)
    with pytest.raises(DataError):
        encode_hlqp(QuantizedModel(model.packed, other.params))
    with pytest.raises(DataError):
        encode_hlqp(model, layout="columns")


def test_save_missing_dir(tmp_path, rng):
    model, _, _ = make_model(rng)
    with pytest.raises(OSError, match="cannot write"):
        save_hlqp(tmp_path / "nope" / "m.hlqp", model)


def test_raw_roundtrip(tmp_path, rng):
    a = rng.standard_normal((5, 7)).astype(np.float32)
    path = tmp_path / "w.raw"
    write_raw(path, a)
    assert path.stat().st_size == 4 * 35
    assert json.loads(sidecar_path(path).read_text()) == {"shape": [5, 7], "order": "row-major"}
    np.testing.assert_array_equal(read_raw(path), a)


def test_raw_length_mismatch(tmp_path, rng):
    path = tmp_path / "w.raw"
    write_raw(path, np.zeros((4, 4), np.float32))
    sidecar_path(path).write_text(json.dumps({"shape": [4, 5], "order": "row-major"}))
    with pytest.raises(DataError, match="needs 80"):
        read_raw(path)


def test_raw_missing_sidecar(tmp_path):
    path = tmp_path / "w.raw"
    path.write_bytes(bytes(16))
    with pytest.raises(OSError):
        read_raw(path)
