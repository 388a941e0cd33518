import numpy as np
import pytest

from hlqkit.errors import ConfigError, DataError, TuningError
from hlqkit.finetune import (
    LayerSample, TuneConfig, output_loss, output_loss_grad, reconstruct_stage1, reconstruct_stage2,
)
from hlqkit.quant import (
    HlqParams, QuantConfig, hlq_alternating, hlq_dequantize, rtn_dequantize, rtn_quantize,
)


def loss_oracle(x, w, bits, s, z, g):
    """Output loss with W_hat expanded bit by bit in float64."""
    n, k = bits.shape
    w_hat = np.zeros((n, k))
    grp = np.arange(k) // g
    for j in range(s.shape[-1]):
        w_hat += ((bits >> j) & 1) * s[:, grp, j]
    w_hat += z[:, grp]
    r = x @ w.T - x @ w_hat.T
    return float(np.mean(r * r))


def layer(seed, n=16, k=128, m=64, q=2, g=64):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.02, size=(n, k)).astype(np.float32)
    x = rng.standard_normal((m, k)).astype(np.float32)
    params, bits = hlq_alternating(w, QuantConfig(q=q, g=g))
    return LayerSample(x, w), params, bits


def test_stage1_single_layer_identical(rng):
    w = rng.normal(0, 0.02, size=(8, 128)).astype(np.float32)
    cfg = QuantConfig(q=3, g=64)
    p1, b1 = reconstruct_stage1(w, cfg)
    p2, b2 = hlq_alternating(w, cfg)
    np.testing.assert_array_equal(b1, b2)
    np.testing.assert_array_equal(p1.scales, p2.scales)
    np.testing.assert_array_equal(p1.zeros, p2.zeros)


def test_stage1_layers_independent(rng):
    ws = [rng.normal(0, 0.02, size=(4, 128)).astype(np.float32) for _ in range(2)]
    cfg = QuantConfig(q=2, g=32)
    together = reconstruct_stage1(ws, cfg)
    for w, (p, b) in zip(ws, together):
        ps, bs = reconstruct_stage1(w, cfg)
        np.testing.assert_array_equal(b, bs)
        np.testing.assert_array_equal(p.scales, ps.scales)


def test_stage1_beats_rtn(rng):
    w = rng.normal(0, 0.02, size=(16, 256)).astype(np.float32)
    cfg = QuantConfig(q=3, g=128)
    p, b = reconstruct_stage1(w, cfg)
    hlq = np.mean((w - hlq_dequantize(b, p)) ** 2)
    rtn = np.mean((w - rtn_dequantize(rtn_quantize(w, cfg))) ** 2)
    assert hlq < rtn


def test_stage2_exact_layer_unchanged(rng):
    n, k, q, g = 4, 64, 2, 32
    bits = rng.integers(0, 4, size=(n, k)).astype(np.uint8)
    scales = rng.choice([0.25, 0.5, 1.0], size=(n, k // g, q))
    params = HlqParams(scales, rng.integers(-8, 8, size=(n, k // g)) / 8.0, q, g)
    w = hlq_dequantize(bits, params)
    sample = LayerSample(rng.integers(-3, 4, size=(16, k)), w)
    hist = []
    out = reconstruct_stage2(sample, bits, params, history=hist)
    assert hist[0] == 0.0
    np.testing.assert_allclose(out.scales, params.scales, atol=1e-12)
    np.testing.assert_allclose(out.zeros, params.zeros, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    sample, params, bits = layer(seed, n=6, k=64, m=24, q=3, g=32)
    x = sample.x.astype(np.float64)
    y = x @ sample.w.astype(np.float64).T
    loss, gs, gz = output_loss_grad(x, y, bits, params)
    s0 = params.scales.astype(np.float64)
    z0 = params.zeros.astype(np.float64)
    w64 = sample.w.astype(np.float64)
    assert loss == pytest.approx(loss_oracle(x, w64, bits, s0, z0, 32), rel=1e-10)

    rng = np.random.default_rng(100 + seed)
    scale = max(np.abs(gs).max(), np.abs(gz).max())
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        s, z = s0.copy(), z0.copy()
        if rng.random() < 0.7:
            idx = tuple(rng.integers(0, d) for d in s.shape)
            s[idx] += h
            up = loss_oracle(x, w64, bits, s, z, 32)
            s[idx] -= 2 * h
            down = loss_oracle(x, w64, bits, s, z, 32)
            analytic = gs[idx]
        else:
            idx = tuple(rng.integers(0, d) for d in z.shape)
            z[idx] += h
            up = loss_oracle(x, w64, bits, s, z, 32)
            z[idx] -= 2 * h
            down = loss_oracle(x, w64, bits, s, z, 32)
            analytic = gz[idx]
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - analytic) / max(abs(fd), 1e-3 * scale))
    assert worst <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_stage2_does_not_increase_loss(seed):
    sample, params, bits = layer(seed)
    hist = []
    out = reconstruct_stage2(sample, bits, params, TuneConfig(), hist)
    assert len(hist) == 3
    assert hist[-1] <= hist[0]
    x = sample.x.astype(np.float64)
    final = output_loss(x, x @ sample.w.astype(np.float64).T, hlq_dequantize(bits, out))
    assert final == pytest.approx(hist[-1], rel=1e-4)


def test_stage2_lr_zero_is_identity():
    sample, params, bits = layer(7)
    out = reconstruct_stage2(sample, bits, params, TuneConfig(lr=0.0, epochs=3))
    np.testing.assert_array_equal(out.scales, params.scales)
    np.testing.assert_array_equal(out.zeros, params.zeros)


def test_stage2_leaves_bits_alone():
    sample, params, bits = layer(8)
    before = bits.copy()
    reconstruct_stage2(sample, bits, params, TuneConfig(lr=1e-2))
    np.testing.assert_array_equal(bits, before)


def test_stage2_divergence():
    sample, params, bits = layer(9)
    with pytest.raises(TuningError, match="smaller lr"):
        reconstruct_stage2(sample, bits, params, TuneConfig(lr=50.0, epochs=2))


def test_stage2_shape_mismatch():
    sample, params, bits = layer(10)
    with pytest.raises(DataError):
        reconstruct_stage2(sample, bits[:, :64], params)


@pytest.mark.parametrize("kw", [{"lr": -1.0}, {"epochs": 0}, {"batch": 0}])
def test_tune_config_validation(kw):
    with pytest.raises(ConfigError):
        TuneConfig(**kw)


def test_layer_sample_validation():
    with pytest.raises(DataError):
        LayerSample(np.ones((3, 4)), np.ones((2, 5)))
    with pytest.raises(DataError):
        LayerSample(np.full((1, 4), np.inf), np.ones((2, 4)))
