"""Group-wise weight quantization formats and parameter search.

Two formats live here:

* uniform round-to-nearest (RTN) with an integer zero-point, and
* hierarchical linear quantization (HLQ), where each weight is
  ``sum_j s_j * b_j + z`` with ``b_j`` in {0, 1} and one scale per bit.

HLQ parameters are found either by alternating between nearest-codeword
assignment and a least-squares refit, or by projected gradient descent on
the reconstruction error. Weight matrices are plain ``float32`` arrays of
shape ``(n, k)``; groups run along ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .parallel import ordered_map, row_chunks

MAX_BITS = 8


@dataclass(frozen=True)
class QuantConfig:
    """Knobs shared by every quantizer.

    ``lr`` and ``epsilon`` only affect the gradient search. ``chunk_rows``
    bounds peak memory; it never changes results.
    """

    q: int = 2
    g: int = 128
    t_max: int = 10
    chunk_rows: int = 256
    epsilon: float = 1e-12
    lr: float = 0.5
    threads: int | None = None

    def __post_init__(self):
        if not 1 <= self.q <= MAX_BITS:
            raise ConfigError(f"bit width q={self.q} outside [1, {MAX_BITS}]")
        if self.g < 1:
            raise ConfigError(f"group size g={self.g} must be positive")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.chunk_rows < 1:
            raise ConfigError("chunk_rows must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")


@dataclass
class HlqParams:
    scales: np.ndarray  # (n, k/g, q) float32
    zeros: np.ndarray  # (n, k/g) float32
    q: int
    g: int

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.zeros = np.asarray(self.zeros, dtype=np.float32)
        if self.scales.ndim != 3 or self.scales.shape[-1] != self.q:
            raise DataError(f"scales shape {self.scales.shape} does not end in q={self.q}")
        if self.zeros.shape != self.scales.shape[:2]:
            raise DataError(f"zeros shape {self.zeros.shape} != {self.scales.shape[:2]}")

    @property
    def n(self) -> int:
        return self.scales.shape[0]

    @property
    def k(self) -> int:
        return self.scales.shape[1] * self.g


@dataclass
class UniformQuant:
    w_int: np.ndarray  # (n, k) integer codes
    scale: np.ndarray  # (n, k/g) float32
    zero: np.ndarray  # (n, k/g) integer zero-points
    q: int
    g: int


def as_weight(w, name: str = "weight") -> np.ndarray:
    """Validate and convert to a 2-D finite float32 array."""
    w = np.asarray(w)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise DataError(f"{name} must be a non-empty 2-D matrix, got shape {w.shape}")
    w = w.astype(np.float32, copy=False)
    if not np.all(np.isfinite(w)):
        raise DataError(f"{name} contains non-finite entries")
    return w


def _grouped(w: np.ndarray, g: int) -> np.ndarray:
    n, k = w.shape
    if k % g:
        raise ConfigError(f"group size {g} does not divide k={k}")
    return w.reshape(n, k // g, g)


def build_codebook(q: int) -> np.ndarray:
    """All ``2**q`` binary codewords; bit j of row m is ``(m >> j) & 1``."""
    if not 1 <= q <= MAX_BITS:
        raise ConfigError(f"bit width q={q} outside [1, {MAX_BITS}]")
    m = np.arange(1 << q)
    return ((m[:, None] >> np.arange(q)) & 1).astype(np.uint8)


# -- uniform baseline ------------------------------------------------------


def rtn_quantize(w, cfg: QuantConfig) -> UniformQuant:
    w = as_weight(w)
    wg = _grouped(w, cfg.g)
    qmax = (1 << cfg.q) - 1
    lo = wg.min(axis=-1)
    hi = wg.max(axis=-1)
    scale = ((hi - lo) / qmax).astype(np.float32)
    scale[hi == lo] = 1.0
    zero = np.clip(np.rint(-lo / scale), 0, qmax)
    w_int = np.clip(np.rint(wg / scale[..., None]) + zero[..., None], 0, qmax)
    return UniformQuant(
        w_int=w_int.reshape(w.shape).astype(np.int32),
        scale=scale,
        zero=zero.astype(np.int32),
        q=cfg.q,
        g=cfg.g,
    )


def rtn_dequantize(uq: UniformQuant) -> np.ndarray:
    n, k = uq.w_int.shape
    if uq.scale.shape != (n, k // uq.g) or uq.zero.shape != uq.scale.shape or k % uq.g:
        raise DataError("uniform quantization arrays have inconsistent shapes")
    wi = uq.w_int.reshape(n, k // uq.g, uq.g).astype(np.float32)
    z = uq.zero.astype(np.float32)[..., None]
    return ((wi - z) * uq.scale[..., None].astype(np.float32)).reshape(n, k)


def uniform_as_hlq(uq: UniformQuant) -> tuple[HlqParams, np.ndarray]:
    """Express a uniform grid in HLQ form: ``s_j = 2**j * s``, ``z = -zero * s``.

    This is how uniform weights run on the bit-serial kernel.
    """
    pow2 = (2.0 ** np.arange(uq.q)).astype(np.float32)
    scales = uq.scale[..., None].astype(np.float32) * pow2
    zeros = -uq.zero.astype(np.float32) * uq.scale.astype(np.float32)
    return HlqParams(scales, zeros, uq.q, uq.g), uq.w_int.astype(np.uint8)


# -- HLQ primitives (float64 internals) ------------------------------------


def _init64(wg: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    lo = wg.min(axis=-1).astype(np.float64)
    hi = wg.max(axis=-1).astype(np.float64)
    delta = (hi - lo) / ((1 << q) - 1)
    s = delta[..., None] * (2.0 ** np.arange(q))
    return s, lo


def _candidates64(s: np.ndarray, z: np.ndarray, cb: np.ndarray) -> np.ndarray:
    # V = s C^T + z, shape (..., 2**q)
    return np.einsum("...j,mj->...m", s, cb.astype(np.float64)) + z[..., None]


def _assign64(wg: np.ndarray, s: np.ndarray, z: np.ndarray, cb: np.ndarray) -> np.ndarray:
    v = _candidates64(s, z, cb)
    dist = np.abs(wg.astype(np.float64)[..., :, None] - v[..., None, :])
    # argmin keeps the first minimum, i.e. the smaller codeword index on ties
    return dist.argmin(axis=-1).astype(np.uint8)


def _recon64(idx: np.ndarray, s: np.ndarray, z: np.ndarray, cb: np.ndarray) -> np.ndarray:
    b = cb[idx].astype(np.float64)
    return np.einsum("...cj,...j->...c", b, s) + z[..., None]


def _lse64(wg: np.ndarray, idx: np.ndarray, cb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = cb[idx].astype(np.float64)
    design = np.concatenate([b, np.ones(b.shape[:-1] + (1,))], axis=-1)
    # min-norm least squares; rcond drops the exactly-dependent directions
    pinv = np.linalg.pinv(design, rcond=1e-10)
    sol = np.einsum("...ic,...c->...i", pinv, wg.astype(np.float64))
    s, z = sol[..., :-1], sol[..., -1]
    # zero-range groups: keep the exact constant instead of SVD round-off
    flat = wg.min(axis=-1) == wg.max(axis=-1)
    if flat.any():
        s = np.where(flat[..., None], 0.0, s)
        z = np.where(flat, wg[..., 0].astype(np.float64), z)
    return s, z


def _mse64(wg: np.ndarray, recon: np.ndarray) -> np.ndarray:
    d = wg.astype(np.float64) - recon
    return np.mean(d * d, axis=-1)


def candidate_set(params: HlqParams, cb: np.ndarray | None = None) -> np.ndarray:
    """Per-group candidate values, shape ``(n, k/g, 2**q)``."""
    cb = build_codebook(params.q) if cb is None else cb
    return _candidates64(params.scales.astype(np.float64), params.zeros.astype(np.float64), cb)


def hlq_init(w, cfg: QuantConfig) -> HlqParams:
    w = as_weight(w)
    s, z = _init64(_grouped(w, cfg.g), cfg.q)
    return HlqParams(s, z, cfg.q, cfg.g)


def hlq_assign(w, params: HlqParams, cb: np.ndarray | None = None) -> np.ndarray:
    """Nearest-candidate codeword index for every weight, shape ``(n, k)``."""
    w = as_weight(w)
    cb = build_codebook(params.q) if cb is None else cb
    if w.shape != (params.n, params.k):
        raise DataError(f"weight shape {w.shape} does not match params ({params.n}, {params.k})")
    wg = _grouped(w, params.g)
    idx = _assign64(wg, params.scales.astype(np.float64), params.zeros.astype(np.float64), cb)
    return idx.reshape(w.shape)


def hlq_lse(w, bits, cfg: QuantConfig) -> HlqParams:
    w = as_weight(w)
    bits = np.asarray(bits)
    if bits.shape != w.shape:
        raise DataError(f"bits shape {bits.shape} != weight shape {w.shape}")
    cb = build_codebook(cfg.q)
    s, z = _lse64(_grouped(w, cfg.g), _grouped(bits, cfg.g), cb)
    return HlqParams(s, z, cfg.q, cfg.g)


def hlq_dequantize(bits, params: HlqParams, cb: np.ndarray | None = None) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.shape != (params.n, params.k):
        raise DataError(f"bits shape {bits.shape} does not match params ({params.n}, {params.k})")
    if bits.size and int(bits.max()) >= (1 << params.q):
        raise DataError(f"bit assignment exceeds 2**q - 1 for q={params.q}")
    cb = build_codebook(params.q) if cb is None else cb
    b = cb[_grouped(bits, params.g)].astype(np.float32)
    out = np.einsum("ngcj,ngj->ngc", b, params.scales) + params.zeros[..., None]
    return out.reshape(bits.shape).astype(np.float32)


# -- alternating search -----------------------------------------------------


def _alternating_chunk(wg: np.ndarray, q: int, t_max: int, cb: np.ndarray):
    s, z = _init64(wg, q)
    idx = _assign64(wg, s, z, cb)
    history = [_mse64(wg, _recon64(idx, s, z, cb))]
    for _ in range(t_max):
        idx = _assign64(wg, s, z, cb)
        s, z = _lse64(wg, idx, cb)
        history.append(_mse64(wg, _recon64(idx, s, z, cb)))
    return s, z, idx, np.stack(history)


def hlq_alternating(w, cfg: QuantConfig, return_history: bool = False):
    """Alternate bit-pattern selection and least-squares refit for ``t_max`` rounds.

    Returns ``(params, bits)``. With ``return_history=True`` a third value
    holds the per-group MSE before the first round and after each round,
    shape ``(t_max + 1, n, k/g)``.
    """
    w = as_weight(w)
    wg = _grouped(w, cfg.g)
    cb = build_codebook(cfg.q)
    parts = ordered_map(
        lambda sl: _alternating_chunk(wg[sl], cfg.q, cfg.t_max, cb),
        row_chunks(w.shape[0], cfg.chunk_rows),
        cfg.threads,
    )
    s = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts])
    idx = np.concatenate([p[2] for p in parts])
    params = HlqParams(s, z, cfg.q, cfg.g)
    bits = idx.reshape(w.shape)
    if return_history:
        return params, bits, np.concatenate([p[3] for p in parts], axis=1)
    return params, bits


# -- gradient search ----------------------------------------------------------


def _loss_grad64(wg, idx, s, z, cb):
    b = cb[idx].astype(np.float64)
    r = wg.astype(np.float64) - (np.einsum("...cj,...j->...c", b, s) + z[..., None])
    g = wg.shape[-1]
    loss = np.mean(r * r, axis=-1)
    grad_s = -2.0 / g * np.einsum("...c,...cj->...j", r, b)
    grad_z = -2.0 / g * r.sum(axis=-1)
    return loss, grad_s, grad_z


def hlq_loss_grad(w, bits, params: HlqParams):
    """Per-group MSE and its exact gradient w.r.t. (scales, zeros), bits held fixed."""
    w = as_weight(w)
    cb = build_codebook(params.q)
    return _loss_grad64(
        _grouped(w, params.g),
        _grouped(np.asarray(bits), params.g),
        params.scales.astype(np.float64),
        params.zeros.astype(np.float64),
        cb,
    )


def _gradient_chunk(wg, q, t_max, lr, eps, cb):
    s, z = _init64(wg, q)
    lo = wg.min(axis=-1).astype(np.float64)
    hi = wg.max(axis=-1).astype(np.float64)
    prev = np.full(z.shape, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for _ in range(t_max):
        if not active.any():
            break
        idx = _assign64(wg, s, z, cb)
        loss, gs, gz = _loss_grad64(wg, idx, s, z, cb)
        step = active[..., None]
        s = np.where(step, np.maximum(s - lr * gs, 0.0), s)
        z = np.where(active, np.clip(z - lr * gz, lo, hi), z)
        # stop a group once its loss stops improving by at least eps
        active &= (prev - loss) >= eps
        prev = np.where(active, loss, prev)
    idx = _assign64(wg, s, z, cb)
    return s, z, idx


def hlq_gradient(w, cfg: QuantConfig):
    """Projected gradient descent on per-group MSE.

    Each iteration picks the nearest codewords under the current parameters,
    then takes one step on (scales, zeros) with the assignment frozen.
    Scales are clamped at zero and zero-points to the group's value range.
    """
    w = as_weight(w)
    wg = _grouped(w, cfg.g)
    cb = build_codebook(cfg.q)
    parts = ordered_map(
        lambda sl: _gradient_chunk(wg[sl], cfg.q, cfg.t_max, cfg.lr, cfg.epsilon, cb),
        row_chunks(w.shape[0], cfg.chunk_rows),
        cfg.threads,
    )
    s = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts])
    idx = np.concatenate([p[2] for p in parts])
    return HlqParams(s, z, cfg.q, cfg.g), idx.reshape(w.shape)
