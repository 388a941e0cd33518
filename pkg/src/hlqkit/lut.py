"""Bit-serial lookup-table GEMM.

Weights are split into one-bit planes, re-expressed with +/-1 signs so that
only half of each activation table has to be stored, packed into 16x32 tiles
and multiplied against activations purely through table lookups and adds.

Packed layout
-------------
One tile covers ``TR = 16`` output channels and ``TC = 32`` input positions,
i.e. eight activation groups of ``GA = 4``. For each plane a tile holds eight
``uint64`` words, one per activation group; nibble ``r`` of a word (bits
``4r .. 4r+3``) is the 4-bit pattern of output row ``r`` for that group, with
bit ``e`` belonging to input ``e`` of the group. Words are stored
``[row_tile, col_tile, plane, group]``, so a tile's planes are contiguous.

Table layout
------------
The stored half-table for activations ``(x1, x2, x3, x4)`` has 8 entries; entry
``p`` is ``s1*x1 + s2*x2 + s3*x3 + x4`` where ``s_e = +1`` if bit ``e-1`` of
``p`` is set and ``-1`` otherwise. A nibble ``u`` with its top bit clear reads
``-table[~u & 7]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .parallel import ordered_map, row_chunks
from .quant import HlqParams

GA = 4
TR = 16
TC = 32
HALF = 1 << (GA - 1)
ROW_BLOCK = 1024  # rows per worker task, multiple of TR

_SHIFT64 = np.arange(64, dtype=np.uint64)
_NIBBLE_SHIFT = (4 * np.arange(TR)).astype(np.uint64)


class LookupCounter:
    """Counts table lookups performed by the kernels."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)


@dataclass
class MirroredParams:
    scales_hat: np.ndarray  # (n, k/g, q)
    zeros_hat: np.ndarray  # (n, k/g)
    q: int
    g: int

    @property
    def n(self) -> int:
        return self.scales_hat.shape[0]

    @property
    def k(self) -> int:
        return self.scales_hat.shape[1] * self.g


@dataclass
class PackedWeights:
    words: np.ndarray  # uint64 (n_pad/TR, k_pad/TC, q, TC/GA)
    n: int
    k: int
    q: int
    g: int
    pad_n: int
    pad_k: int

    @property
    def n_padded(self) -> int:
        return self.n + self.pad_n

    @property
    def k_padded(self) -> int:
        return self.k + self.pad_k

    def header(self) -> dict:
        return {
            "n": self.n, "k": self.k, "q": self.q, "g": self.g, "gA": GA,
            "TR": TR, "TC": TC, "pad_n": self.pad_n, "pad_k": self.pad_k,
        }


@dataclass
class QuantizedLut:
    entries: np.ndarray  # int8 (..., HALF)
    scale: np.ndarray  # float32 (...)

    def dequantize(self) -> np.ndarray:
        return self.entries.astype(np.float32) * self.scale[..., None]


# -- bit planes ---------------------------------------------------------------


def decompose_bitplanes(bits, q: int) -> np.ndarray:
    """Split codeword indices into ``q`` one-bit planes, shape ``(q, n, k)``."""
    bits = np.asarray(bits)
    if bits.size and (bits.min() < 0 or int(bits.max()) >= (1 << q)):
        raise DataError(f"assignments must lie in [0, 2**{q})")
    bits = bits.astype(np.uint32)
    return np.stack([((bits >> j) & 1).astype(np.uint8) for j in range(q)])


def recompose_bitplanes(planes: np.ndarray) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.uint32)
    out = np.zeros(planes.shape[1:], dtype=np.uint32)
    for j in range(planes.shape[0]):
        out |= planes[j] << j
    return out.astype(np.uint8)


# -- mirror reparameterization --------------------------------------------------


def mirror_transform(params: HlqParams) -> MirroredParams:
    """``s_hat = s/2``, ``z_hat = z + sum(s)/2``, bits read as signs ``2b - 1``."""
    s = params.scales.astype(np.float32)
    return MirroredParams(
        scales_hat=(s * np.float32(0.5)).astype(np.float32),
        zeros_hat=(params.zeros + np.float32(0.5) * s.sum(axis=-1)).astype(np.float32),
        q=params.q,
        g=params.g,
    )


def mirrored_dequantize(bits, mp: MirroredParams) -> np.ndarray:
    bits = np.asarray(bits)
    n, k = bits.shape
    signs = 2.0 * decompose_bitplanes(bits, mp.q).astype(np.float32) - 1.0  # (q, n, k)
    signs = signs.reshape(mp.q, n, k // mp.g, mp.g)
    out = np.einsum("jngc,ngj->ngc", signs, mp.scales_hat) + mp.zeros_hat[..., None]
    return out.reshape(n, k).astype(np.float32)


# -- tile packing ---------------------------------------------------------------


def rearrange_tiles(planes, g: int) -> PackedWeights:
    planes = np.asarray(planes, dtype=np.uint8)
    if planes.ndim != 3:
        raise DataError("planes must be shaped (q, n, k)")
    q, n, k = planes.shape
    pad_n = (-n) % TR
    pad_k = (-k) % TC
    p = np.zeros((q, n + pad_n, k + pad_k), dtype=np.uint64)
    p[:, :n, :k] = planes
    rt, ct = (n + pad_n) // TR, (k + pad_k) // TC
    # (q, rt, r, ct, a, e) -> (rt, ct, q, a, r, e): bit index r*4 + e within a word
    p = p.reshape(q, rt, TR, ct, TC // GA, GA).transpose(1, 3, 0, 4, 2, 5)
    p = p.reshape(rt, ct, q, TC // GA, TR * GA)
    words = (p << _SHIFT64).sum(axis=-1, dtype=np.uint64)
    return PackedWeights(words=words, n=n, k=k, q=q, g=g, pad_n=pad_n, pad_k=pad_k)


def unpack_tiles(pw: PackedWeights) -> np.ndarray:
    rt, ct, q, na = pw.words.shape
    b = ((pw.words[..., None] >> _SHIFT64) & np.uint64(1)).astype(np.uint8)
    b = b.reshape(rt, ct, q, na, TR, GA).transpose(2, 0, 4, 1, 3, 5)
    b = b.reshape(q, rt * TR, ct * TC)
    return np.ascontiguousarray(b[:, : pw.n, : pw.k])


def _nibbles(pw: PackedWeights, rows: slice) -> np.ndarray:
    """Decode 4-bit patterns for a row-tile range: ``(q, rows, k_pad/GA)`` uint8."""
    tiles = pw.words[rows.start // TR: rows.stop // TR]
    rt, ct, q, na = tiles.shape
    nib = (tiles[..., None] >> _NIBBLE_SHIFT) & np.uint64(0xF)  # (rt, ct, q, a, r)
    nib = nib.transpose(2, 0, 4, 1, 3).reshape(q, rt * TR, ct * na)
    return nib.astype(np.intp)


# -- tables ---------------------------------------------------------------------

_HALF_SIGNS = np.array(
    [[1.0 if (p >> e) & 1 else -1.0 for e in range(GA - 1)] + [1.0] for p in range(HALF)],
    dtype=np.float32,
)
_FULL_SIGNS = np.array(
    [[1.0 if (u >> e) & 1 else -1.0 for e in range(GA)] for u in range(1 << GA)],
    dtype=np.float32,
)
_U = np.arange(1 << GA)
_MIRROR_SRC = np.where(_U & HALF, _U & (HALF - 1), (~_U) & (HALF - 1))
_MIRROR_SIGN = np.where(_U & HALF, 1.0, -1.0).astype(np.float32)


def _signed_sums(xg: np.ndarray, signs: np.ndarray) -> np.ndarray:
    # fixed left-to-right order so negated patterns round identically
    acc = signs[:, 0] * xg[..., 0:1]
    for e in range(1, GA):
        acc = acc + signs[:, e] * xg[..., e:e + 1]
    return acc.astype(np.float32)


def build_luts(x) -> np.ndarray:
    """Half tables for every activation group of ``x`` (length multiple of 4): ``(k/4, 8)``."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] % GA:
        raise DataError(f"activation length {x.shape[-1]} is not a multiple of {GA}")
    return _signed_sums(x.reshape(x.shape[:-1] + (-1, GA)), _HALF_SIGNS)


def build_lut(x_group) -> np.ndarray:
    x_group = np.asarray(x_group, dtype=np.float32)
    if x_group.shape != (GA,):
        raise ConfigError(f"activation group must have exactly {GA} values")
    return build_luts(x_group)[0]


def expand_mirrored(lut: np.ndarray) -> np.ndarray:
    """Virtual 16-entry table from a stored half table (negation of the complement)."""
    return lut[..., _MIRROR_SRC] * _MIRROR_SIGN


def direct_full_luts(x) -> np.ndarray:
    """All 16 signed sums computed directly; used to check mirroring is lossless."""
    x = np.asarray(x, dtype=np.float32)
    return _signed_sums(x.reshape(x.shape[:-1] + (-1, GA)), _FULL_SIGNS)


def quantize_lut(lut) -> QuantizedLut:
    """Int8 tables with one scale per table: ``scale = max|entry| / 127``."""
    lut = np.asarray(lut, dtype=np.float32)
    peak = np.abs(lut).max(axis=-1)
    scale = np.where(peak > 0, peak / np.float32(127.0), np.float32(1.0)).astype(np.float32)
    entries = np.clip(np.rint(lut / scale[..., None]), -127, 127).astype(np.int8)
    return QuantizedLut(entries=entries, scale=scale)


# -- kernels --------------------------------------------------------------------


def _check_mirrored(pw: PackedWeights, mp: MirroredParams):
    if (mp.n, mp.k, mp.q, mp.g) != (pw.n, pw.k, pw.q, pw.g):
        raise DataError(
            f"params (n={mp.n}, k={mp.k}, q={mp.q}, g={mp.g}) do not match packed weights "
            f"(n={pw.n}, k={pw.k}, q={pw.q}, g={pw.g})"
        )
    if mp.g % GA:
        raise ConfigError(f"group size {mp.g} must be a multiple of {GA} for the LUT kernel")


def _row_tables(x: np.ndarray, table_mode: str, mirror: bool) -> np.ndarray:
    """16-entry tables per activation group for one padded activation row."""
    if table_mode == "float":
        half = build_luts(x)
    elif table_mode == "int8":
        half = quantize_lut(build_luts(x)).dequantize()
        if not mirror:
            raise ConfigError("int8 tables are only defined in mirrored storage")
    else:
        raise ConfigError(f"unknown table mode {table_mode!r}")
    if mirror:
        return expand_mirrored(half)
    return direct_full_luts(x)


def _gemv_rows(nib, tables, mp, xsum, rows, n_chunks):
    """Bit-serial product for a block of rows; ``nib`` is ``(q, rows, k_pad/GA)``."""
    q = mp.q
    per_group = mp.g // GA
    n_groups = mp.k // mp.g
    r0, r1 = rows.start, min(rows.stop, mp.n)
    nr = r1 - r0
    chunk_idx = np.arange(n_chunks)
    vals = tables[chunk_idx, nib[:, :nr, :n_chunks]]  # (q, nr, n_chunks)
    vals = vals.reshape(q, nr, n_groups, per_group)
    acc = vals[..., 0].copy()
    for c in range(1, per_group):
        acc += vals[..., c]
    sh = mp.scales_hat[r0:r1]
    zh = mp.zeros_hat[r0:r1]
    y = np.zeros(nr, dtype=np.float32)
    for grp in range(n_groups):
        t = sh[:, grp, 0] * acc[0, :, grp]
        for j in range(1, q):
            t = t + sh[:, grp, j] * acc[j, :, grp]
        y += t + zh[:, grp] * xsum[grp]
    return y


def lut_gemm(
    pw: PackedWeights,
    mp: MirroredParams,
    x,
    table_mode: str = "float",
    mirror: bool = True,
    counter: LookupCounter | None = None,
    threads: int | None = None,
) -> np.ndarray:
    """``X @ W_hat^T`` through table lookups. ``x`` is ``(m, k)``; returns ``(m, n)``.

    ``mirror=False`` builds the full 16-entry tables directly instead of
    expanding the stored half; results are bit-identical.
    """
    _check_mirrored(pw, mp)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != pw.k:
        raise DataError(f"activations must be (m, {pw.k}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("activations contain non-finite entries")
    m = x.shape[0]
    xp = np.zeros((m, pw.k_padded), dtype=np.float32)
    xp[:, : pw.k] = x
    n_chunks = pw.k // GA
    blocks = row_chunks(pw.n_padded, ROW_BLOCK)
    blocks = [b for b in blocks if b.start < pw.n]
    nibbles = ordered_map(lambda b: _nibbles(pw, b), blocks, threads)
    out = np.empty((m, pw.n), dtype=np.float32)
    for i in range(m):
        tables = _row_tables(xp[i], table_mode, mirror)
        xsum = x[i].reshape(-1, mp.g).sum(axis=-1, dtype=np.float32)
        ys = ordered_map(
            lambda bn: _gemv_rows(bn[1], tables, mp, xsum, bn[0], n_chunks),
            list(zip(blocks, nibbles)),
            threads,
        )
        out[i] = np.concatenate(ys)
        if counter is not None:
            counter.add(pw.q * pw.n * n_chunks)
    return out


def lut_gemv(pw, mp, x, table_mode: str = "float", mirror: bool = True,
             counter: LookupCounter | None = None, threads: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise DataError("lut_gemv expects a 1-D activation vector")
    return lut_gemm(pw, mp, x[None, :], table_mode, mirror, counter, threads)[0]


def reference_gemm(w_hat, x) -> np.ndarray:
    """Dense ``X @ W_hat^T`` in float32."""
    w_hat = np.asarray(w_hat, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != w_hat.shape[1]:
        raise DataError(f"activation width {x.shape[1]} != weight width {w_hat.shape[1]}")
    return x @ w_hat.T


def int8_error_bound(mp: MirroredParams, x) -> np.ndarray:
    """Per-output bound on ``|int8 result - float result|``, shape ``(m, n)``.

    ``(k / GA) * max_scale / 2``, where ``max_scale`` is the largest table step
    of the row times the row's largest per-group sum of ``|s_hat|``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    steps = quantize_lut(build_luts(x)).scale.max(axis=-1).astype(np.float64)  # (m,)
    weight = np.abs(mp.scales_hat.astype(np.float64)).sum(axis=-1).max(axis=-1)  # (n,)
    return (mp.k / GA) * np.outer(steps, weight) / 2.0


def relative_inf_error(y, y_ref) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    denom = float(np.max(np.abs(y_ref)))
    err = float(np.max(np.abs(y - y_ref)))
    if denom == 0.0:
        return err
    return err / denom
