"""Per-layer reconstruction: HLQ initialization, then output-error refinement of (s, z)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, TuningError
from .quant import HlqParams, QuantConfig, as_weight, build_codebook, hlq_alternating

DIVERGENCE_FACTOR = 10.0


@dataclass
class LayerSample:
    x: np.ndarray  # (m, k) inputs
    w: np.ndarray  # (n, k) full-precision weights

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.w = as_weight(self.w)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] != self.w.shape[1]:
            raise DataError(f"inputs {self.x.shape} do not match weights {self.w.shape}")
        if not np.all(np.isfinite(self.x)):
            raise DataError("layer inputs contain non-finite entries")


@dataclass(frozen=True)
class TuneConfig:
    lr: float = 1e-4
    epochs: int = 2
    batch: int = 32

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


def reconstruct_stage1(w, cfg: QuantConfig):
    """Alternating HLQ search per layer. Accepts one matrix or a sequence of them."""
    if isinstance(w, np.ndarray) and w.ndim == 2:
        return hlq_alternating(w, cfg)
    if isinstance(w, Sequence) or (isinstance(w, np.ndarray) and w.ndim == 3):
        return [hlq_alternating(layer, cfg) for layer in w]
    return hlq_alternating(w, cfg)


class _Linear:
    """Maps (s, z) to W_hat for fixed bits; W_hat is linear in the parameters."""

    def __init__(self, bits: np.ndarray, q: int, g: int):
        n, k = bits.shape
        if k % g:
            raise ConfigError(f"group size {g} does not divide k={k}")
        self.n, self.k, self.q, self.g = n, k, q, g
        cb = build_codebook(q)
        self.b = cb[bits.reshape(n, k // g, g)].astype(np.float64)  # (n, G, g, q)

    def weights(self, s: np.ndarray, z: np.ndarray) -> np.ndarray:
        w = np.einsum("ngcj,ngj->ngc", self.b, s) + z[..., None]
        return w.reshape(self.n, self.k)

    def pullback(self, grad_w: np.ndarray):
        gw = grad_w.reshape(self.n, self.k // self.g, self.g)
        return np.einsum("ngc,ngcj->ngj", gw, self.b), gw.sum(axis=-1)


def output_loss(x, y_target, w_hat) -> float:
    """``||Y - X W_hat^T||_F^2 / (m n)``."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(y_target, dtype=np.float64) - x @ np.asarray(w_hat, dtype=np.float64).T
    return float(np.mean(r * r))


def output_loss_grad(x, y_target, bits, params: HlqParams):
    """Output loss and its exact gradient w.r.t. (scales, zeros)."""
    lin = _Linear(np.asarray(bits), params.q, params.g)
    return _loss_grad(lin, np.asarray(x, np.float64), np.asarray(y_target, np.float64),
                      params.scales.astype(np.float64), params.zeros.astype(np.float64))


def _loss_grad(lin: _Linear, x, y, s, z):
    w_hat = lin.weights(s, z)
    r = y - x @ w_hat.T  # (m, n)
    m, n = r.shape
    loss = float(np.mean(r * r))
    grad_w = -2.0 / (m * n) * (r.T @ x)  # (n, k)
    gs, gz = lin.pullback(grad_w)
    return loss, gs, gz


def reconstruct_stage2(
    sample: LayerSample,
    bits,
    params: HlqParams,
    tune: TuneConfig = TuneConfig(),
    history: list | None = None,
) -> HlqParams:
    """Refine scales and zero-points on the layer-output error with bits frozen.

    Plain mini-batch gradient descent over contiguous batches in sample order.
    The full-precision weights are touched once, to form the target outputs.
    ``history`` (if given) receives the full-sample loss before training and
    after each epoch.
    """
    bits = np.asarray(bits)
    if bits.shape != sample.w.shape or (params.n, params.k) != sample.w.shape:
        raise DataError("bits, params and weights disagree on shape")
    x = sample.x.astype(np.float64)
    y = x @ sample.w.astype(np.float64).T
    lin = _Linear(bits, params.q, params.g)
    s = params.scales.astype(np.float64)
    z = params.zeros.astype(np.float64)

    initial = output_loss(x, y, lin.weights(s, z))
    if history is not None:
        history.append(initial)
    m = x.shape[0]
    for _ in range(tune.epochs):
        for b0 in range(0, m, tune.batch):
            xb, yb = x[b0:b0 + tune.batch], y[b0:b0 + tune.batch]
            _, gs, gz = _loss_grad(lin, xb, yb, s, z)
            s = s - tune.lr * gs
            z = z - tune.lr * gz
        loss = output_loss(x, y, lin.weights(s, z))
        if history is not None:
            history.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(initial, np.finfo(float).tiny):
            raise TuningError(
                f"stage-2 loss diverged ({loss:.3e} vs initial {initial:.3e}); use a smaller lr"
            )
    return HlqParams(s, z, params.q, params.g)
