"""Calibration Hessian and block-wise HLQ with inverse-Hessian error compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigError, DataError, NumericalError
from .quant import HlqParams, QuantConfig, as_weight, hlq_alternating, hlq_dequantize

DEFAULT_BLOCK = 128


@dataclass
class HessianAccumulator:
    h: np.ndarray  # (k, k) float64, damping already added
    damping: float

    @property
    def k(self) -> int:
        return self.h.shape[0]


def _tree_sum(parts: list[np.ndarray]) -> np.ndarray:
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def accumulate_hessian(x, lambda_frac: float = 0.01, chunk: int = 1024) -> HessianAccumulator:
    """``H = 2 X^T X + lambda I`` with ``lambda = lambda_frac * mean(diag(2 X^T X))``.

    Samples are reduced in fixed-size chunks combined pairwise, so the result
    does not depend on how the work is scheduled.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError(f"calibration set must be an (m, k) matrix with m >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("calibration set contains non-finite entries")
    if not lambda_frac > 0:
        raise ConfigError("lambda_frac must be > 0")
    parts = [2.0 * (x[i:i + chunk].T @ x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
    h = _tree_sum(parts)
    h = 0.5 * (h + h.T)
    mean_diag = float(np.mean(np.diag(h)))
    if mean_diag <= 0.0:
        raise CalibrationError("calibration activations are all zero; Hessian diagonal vanishes")
    lam = lambda_frac * mean_diag
    h[np.diag_indices_from(h)] += lam
    return HessianAccumulator(h=h, damping=lam)


def proxy_loss(w, w_hat, hess: HessianAccumulator) -> float:
    """Hessian-weighted error ``tr((W - W_hat) H (W - W_hat)^T)``."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape or w.shape[-1] != hess.k:
        raise DataError(f"shape mismatch: W {w.shape}, W_hat {w_hat.shape}, H {hess.h.shape}")
    d = w - w_hat
    return max(float(np.einsum("ik,kl,il->", d, hess.h, d)), 0.0)


def _inverse_cholesky(h: np.ndarray) -> np.ndarray:
    """Upper factor U with ``H^-1 = U^T U``.

    For any trailing index set R, ``U[R, R]`` factors the inverse of ``H[R, R]``,
    so one factorization serves every block step.
    """
    try:
        lower = np.linalg.cholesky(h)
        eye = np.eye(h.shape[0])
        hinv = np.linalg.solve(lower.T, np.linalg.solve(lower, eye))
        hinv = 0.5 * (hinv + hinv.T)
        return np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "Hessian is not positive definite; increase the damping fraction"
        ) from exc


def hlq_gptq_layer(
    w,
    hess: HessianAccumulator,
    cfg: QuantConfig,
    block_size: int = DEFAULT_BLOCK,
    compensate: bool = True,
):
    """Quantize column blocks left to right, pushing each block's residual onto later columns.

    Every block is quantized as a whole with the alternating search, using the
    already-compensated weights. The residual ``E`` of block B updates the
    remaining columns R by ``E @ inv(U[B, B]) @ U[B, R]``, which equals
    ``E inv(Hinv_BB) Hinv_BR`` for the inverse Hessian of the still-open columns.
    ``compensate=False`` skips the update (plain block-independent HLQ).
    """
    w = as_weight(w)
    n, k = w.shape
    if hess.k != k:
        raise DataError(f"Hessian is {hess.k}x{hess.k} but layer has k={k}")
    block_size = min(block_size, k)
    if k % block_size:
        raise ConfigError(f"block size {block_size} does not divide k={k}")
    if block_size % cfg.g:
        raise ConfigError(f"block size {block_size} is not a multiple of g={cfg.g}")

    u = _inverse_cholesky(hess.h) if compensate else None
    work = w.astype(np.float64)
    scales, zeros, bits = [], [], []
    for b0 in range(0, k, block_size):
        b1 = b0 + block_size
        wb = work[:, b0:b1].astype(np.float32)
        params, bb = hlq_alternating(wb, cfg)
        scales.append(params.scales)
        zeros.append(params.zeros)
        bits.append(bb)
        if u is not None and b1 < k:
            err = work[:, b0:b1] - hlq_dequantize(bb, params).astype(np.float64)
            coupling = np.linalg.solve(u[b0:b1, b0:b1], u[b0:b1, b1:])
            work[:, b1:] -= err @ coupling
    params = HlqParams(np.concatenate(scales, axis=1), np.concatenate(zeros, axis=1), cfg.q, cfg.g)
    return params, np.concatenate(bits, axis=1)
