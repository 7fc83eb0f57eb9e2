import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from models.spectral import HsiCube, SrfMatrix
from services.errors import ShapeMismatch
from services.losses import combined_loss, degraded_l1, l1_loss, loss, regularized_loss, sam_loss
from services.metrics import MetricsReport, evaluate, mrae, psnr, sam, ssim
from services.numerics import finite_diff_grad

GRID = np.linspace(400.0, 700.0, 6)


def _cube(seed, shape=(6, 12, 12), lo=0.2):
    rng = np.random.default_rng(seed)
    return HsiCube(grid=GRID, data=lo + (1 - lo) * rng.random(shape))


# ──────────────────────────────────────────
# 指標
# ──────────────────────────────────────────

def test_evaluate_identical_cubes():
    y = _cube(0)
    report = evaluate(y, y)
    assert report.mrae == 0.0
    assert report.psnr == 300.0
    assert report.sam == 0.0
    assert report.ssim == pytest.approx(1.0, abs=1e-12)


def test_mrae_and_psnr_reference_values():
    y = _cube(1).data
    assert mrae(1.1 * y, y) == pytest.approx(0.1, abs=1e-9)
    assert psnr(y + 0.1, y) == pytest.approx(20.0, abs=1e-9)


def test_mrae_floor_for_zero_reference():
    target = np.zeros((1, 1, 2))
    pred = np.full((1, 1, 2), 1e-4)
    assert mrae(pred, target) == pytest.approx(1.0)


def test_sam_scale_invariant_and_orthogonal():
    y = _cube(2).data
    assert sam(3.0 * y, y) == pytest.approx(0.0, abs=1e-7)
    a = np.zeros((2, 1, 1))
    b = np.zeros((2, 1, 1))
    a[0] = 1.0
    b[1] = 1.0
    assert sam(a, b) == pytest.approx(np.pi / 2)


def test_ssim_small_image_shrinks_window(caplog):
    y = _cube(3, shape=(2, 5, 5)).data
    with caplog.at_level("WARNING"):
        value = ssim(y, y)
    assert value == pytest.approx(1.0, abs=1e-12)
    assert "SSIM" in caplog.text
    assert ssim(y * 0.5, y) < 1.0


def test_evaluate_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        evaluate(_cube(0), _cube(0, shape=(6, 12, 11)))


def test_metrics_report_mean_and_lines():
    reports = [MetricsReport(0.1, 30.0, 0.2, 0.9), MetricsReport(0.3, 40.0, 0.4, 0.7)]
    mean = MetricsReport.mean(reports)
    assert mean.psnr == pytest.approx(35.0)
    assert mean.ssim == pytest.approx(0.8)
    assert mean.to_lines("a.")[1] == f"a.psnr={mean.psnr!r}"
    with pytest.raises(ShapeMismatch):
        MetricsReport.mean([])


# ──────────────────────────────────────────
# 損失
# ──────────────────────────────────────────

def test_l1_gradient():
    rng = np.random.default_rng(4)
    target = rng.random((2, 3, 2, 2))
    pred = target + rng.choice([-1.0, 1.0], size=target.shape) * (0.1 + rng.random(target.shape))
    value, grad = l1_loss(pred, target)
    assert value == pytest.approx(np.mean(np.abs(pred - target)))
    np.testing.assert_allclose(grad, finite_diff_grad(lambda t: l1_loss(t, target)[0], pred), rtol=1e-6, atol=1e-10)


def test_sam_loss_gradient():
    rng = np.random.default_rng(5)
    target = rng.random((2, 4, 2, 3)) + 0.1
    pred = rng.random((2, 4, 2, 3)) + 0.1
    _, grad = sam_loss(pred, target)
    np.testing.assert_allclose(grad, finite_diff_grad(lambda t: sam_loss(t, target)[0], pred), rtol=1e-4, atol=1e-8)


def test_sam_loss_degenerate_pixels():
    target = np.ones((3, 1, 2))
    pred = np.ones((3, 1, 2))
    pred[:, 0, 1] = 0.0
    value, grad = sam_loss(pred, target)
    # 同一スペクトルはクランプ値、ノルムゼロの画素は 0
    assert value == pytest.approx(np.arccos(1 - 1e-7) / 2)
    np.testing.assert_array_equal(grad, 0.0)


def test_combined_loss_adds_weighted_sam():
    a, b = _cube(6).data, _cube(7).data
    value, _ = combined_loss(a, b, 0.1)
    assert value == pytest.approx(l1_loss(a, b)[0] + 0.1 * sam_loss(a, b)[0])
    value_hsi, grad_hsi = loss(_cube(6), _cube(7))
    assert value_hsi == pytest.approx(value)
    assert grad_hsi.shape == a.shape


def test_degraded_l1_with_mixed_sensors():
    rng = np.random.default_rng(8)
    pred = rng.random((2, 5, 2, 2))
    target = rng.random((2, 5, 2, 2))
    srfs = [rng.random((3, 5)), rng.random((2, 5))]
    value, grad = degraded_l1(pred, target, srfs)
    diffs = [np.tensordot(s, p - t, axes=(1, 0)) for s, p, t in zip(srfs, pred, target)]
    expected = sum(np.abs(d).sum() for d in diffs) / sum(d.size for d in diffs)
    assert value == pytest.approx(expected)
    np.testing.assert_allclose(
        grad, finite_diff_grad(lambda t: degraded_l1(t, target, srfs)[0], pred), rtol=1e-5, atol=1e-9
    )
    with pytest.raises(ShapeMismatch):
        degraded_l1(pred, target, srfs[:1])


def test_regularized_loss_adds_degraded_term():
    y_tilde, y = _cube(9), _cube(10)
    srf = SrfMatrix(data=np.random.default_rng(0).random((3, 6)), grid=GRID)
    value, _ = regularized_loss(y_tilde, y, srf, alpha=0.5, lambda_sam=0.1)
    base, _ = loss(y_tilde, y, lambda_sam=0.1)
    assert value == pytest.approx(base + 0.5 * degraded_l1(y_tilde.data, y.data, srf.data)[0])
    assert regularized_loss(y_tilde, y, srf, alpha=0.0, lambda_sam=0.1)[0] == pytest.approx(base)


def test_combined_loss_uniform_overshoot():
    y = _cube(8).data
    value, _ = combined_loss(1.1 * y, y, 0.0)
    assert value == pytest.approx(0.1 * np.abs(y).mean(), rel=1e-12)
