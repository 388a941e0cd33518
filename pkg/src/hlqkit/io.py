"""On-disk formats: the HLQP model container and raw float32 tensors with JSON sidecars.

HLQP layout (all little-endian)::

    b"HLQP" | u32 version | u32 header_len | header (UTF-8 JSON)
    | plane words (u64) | scales (f32, [n, k/g, q]) | zeros (f32, [n, k/g])
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptContainerError, DataError
from .lut import (
    GA, TC, TR, MirroredParams, PackedWeights, mirror_transform, mirrored_dequantize,
    rearrange_tiles, recompose_bitplanes, unpack_tiles,
)
from .quant import HlqParams, hlq_dequantize

MAGIC = b"HLQP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class QuantizedModel:
    packed: PackedWeights
    params: HlqParams | MirroredParams
    format: str = "hlq"

    @property
    def mirrored(self) -> bool:
        return isinstance(self.params, MirroredParams)

    def bits(self) -> np.ndarray:
        return recompose_bitplanes(unpack_tiles(self.packed))

    def mirrored_params(self) -> MirroredParams:
        return self.params if self.mirrored else mirror_transform(self.params)

    def dequantize(self) -> np.ndarray:
        if self.mirrored:
            return mirrored_dequantize(self.bits(), self.params)
        return hlq_dequantize(self.bits(), self.params)


def _atomic_write(path, data: bytes):
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _planes_words(planes: np.ndarray) -> np.ndarray:
    q, n, k = planes.shape
    kw = -(-k // 64)
    p = np.zeros((q, n, kw * 64), dtype=np.uint64)
    p[:, :, :k] = planes
    return (p.reshape(q, n, kw, 64) << np.arange(64, dtype=np.uint64)).sum(-1, dtype=np.uint64)


def _words_planes(words: np.ndarray, k: int) -> np.ndarray:
    b = (words[..., None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    q, n, kw, _ = b.shape
    return b.reshape(q, n, kw * 64)[:, :, :k].astype(np.uint8)


def encode_hlqp(model: QuantizedModel, layout: str = "tiles") -> bytes:
    pw, params = model.packed, model.params
    if (params.n, params.k, params.q, params.g) != (pw.n, pw.k, pw.q, pw.g):
        raise DataError("params and packed weights disagree on (n, k, q, g)")
    if model.format not in ("hlq", "uniform"):
        raise DataError(f"unknown format {model.format!r}")
    if layout == "tiles":
        words = pw.words
    elif layout == "planes":
        words = _planes_words(unpack_tiles(pw))
    else:
        raise DataError(f"unknown layout {layout!r}")
    if model.mirrored:
        scales, zeros = params.scales_hat, params.zeros_hat
    else:
        scales, zeros = params.scales, params.zeros
    header = {
        "n": pw.n, "k": pw.k, "q": pw.q, "g": pw.g, "gA": GA,
        "format": model.format, "layout": layout, "mirrored": model.mirrored,
        "pad_n": pw.pad_n, "pad_k": pw.pad_k, "TR": TR, "TC": TC,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([
        _PREFIX.pack(MAGIC, VERSION, len(hbytes)),
        hbytes,
        np.ascontiguousarray(words, dtype="<u8").tobytes(),
        np.ascontiguousarray(scales, dtype="<f4").tobytes(),
        np.ascontiguousarray(zeros, dtype="<f4").tobytes(),
    ])


def save_hlqp(path, model: QuantizedModel, layout: str = "tiles"):
    _atomic_write(path, encode_hlqp(model, layout))


def _take(buf: memoryview, offset: int, size: int, section: str, where: str):
    if offset + size > len(buf):
        raise CorruptContainerError(
            f"corrupt container {where}: truncated in section '{section}' "
            f"(need {size} bytes at offset {offset}, file has {len(buf)})"
        )
    return buf[offset:offset + size], offset + size


def decode_hlqp(data: bytes, where: str = "<bytes>") -> QuantizedModel:
    buf = memoryview(data)
    raw, off = _take(buf, 0, _PREFIX.size, "prefix", where)
    magic, version, hlen = _PREFIX.unpack(raw)
    if magic != MAGIC:
        raise CorruptContainerError(f"{where} is not an HLQP container (magic {bytes(magic)!r})")
    if version != VERSION:
        raise CorruptContainerError(
            f"{where}: unsupported container version {version} (this reader handles {VERSION})"
        )
    raw, off = _take(buf, off, hlen, "header", where)
    try:
        h = json.loads(bytes(raw).decode("utf-8"))
        n, k, q, g = int(h["n"]), int(h["k"]), int(h["q"]), int(h["g"])
        pad_n, pad_k = int(h["pad_n"]), int(h["pad_k"])
        layout, fmt, mirrored = h["layout"], h["format"], bool(h["mirrored"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptContainerError(f"corrupt container {where}: bad header ({exc})") from exc
    if int(h.get("gA", GA)) != GA or (n + pad_n) % TR or (k + pad_k) % TC or k % g:
        raise CorruptContainerError(f"corrupt container {where}: inconsistent header {h}")

    if layout == "tiles":
        wshape = ((n + pad_n) // TR, (k + pad_k) // TC, q, TC // GA)
    elif layout == "planes":
        wshape = (q, n, -(-k // 64))
    else:
        raise CorruptContainerError(f"corrupt container {where}: unknown layout {layout!r}")
    raw, off = _take(buf, off, 8 * int(np.prod(wshape)), "planes", where)
    words = np.frombuffer(raw, dtype="<u8").reshape(wshape).astype(np.uint64)
    raw, off = _take(buf, off, 4 * n * (k // g) * q, "scales", where)
    scales = np.frombuffer(raw, dtype="<f4").reshape(n, k // g, q).astype(np.float32)
    raw, off = _take(buf, off, 4 * n * (k // g), "zeros", where)
    zeros = np.frombuffer(raw, dtype="<f4").reshape(n, k // g).astype(np.float32)
    if off != len(buf):
        raise CorruptContainerError(f"corrupt container {where}: {len(buf) - off} trailing bytes")

    if layout == "tiles":
        packed = PackedWeights(words, n, k, q, g, pad_n, pad_k)
    else:
        packed = rearrange_tiles(_words_planes(words, k), g)
    if mirrored:
        params = MirroredParams(scales, zeros, q, g)
    else:
        params = HlqParams(scales, zeros, q, g)
    return QuantizedModel(packed, params, fmt)


def load_hlqp(path) -> QuantizedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return decode_hlqp(data, str(path))


# -- raw tensors ----------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_raw(path, array):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    _atomic_write(path, arr.tobytes())
    meta = {"shape": list(arr.shape), "order": "row-major"}
    _atomic_write(sidecar_path(path), json.dumps(meta).encode("utf-8"))


def read_raw(path) -> np.ndarray:
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {exc.filename}: {exc.strerror}") from exc
    except ValueError as exc:
        raise DataError(f"bad sidecar {side}: {exc}") from exc
    shape = tuple(int(d) for d in meta.get("shape", []))
    if meta.get("order", "row-major") != "row-major":
        raise DataError(f"{side}: only row-major order is supported")
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(data) != expected:
        raise DataError(f"{path}: {len(data)} bytes but sidecar shape {list(shape)} needs {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
