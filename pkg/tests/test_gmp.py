import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from models.spectral import MsiImage, PriorCube, SrfMatrix
from services.errors import FeasibilityViolation, GridMismatch, RankDeficient, ShapeMismatch
from services.gmp import (
    GuidanceProjector,
    compute_coefficients,
    min_norm_solution,
    oracle_project,
    project,
)


def _angle(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return 2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def _instance(rng, m=4, c=31, n=16):
    """正の SRF・正の真値・正の事前分布 (係数がすべて正になる例だけを採用)"""
    grid = np.linspace(400.0, 700.0, c)
    while True:
        s = rng.random((m, c))
        srf = SrfMatrix(data=s / s.sum(axis=1, keepdims=True), grid=grid)
        truth = rng.random((c, n)) + 0.1
        msi = MsiImage.from_columns(srf.data @ truth)
        prior = PriorCube(grid=grid, data=rng.random((c, n)) + 0.05)
        if compute_coefficients(srf, msi, prior).assumption_ok.all():
            return srf, msi, prior, truth


def _worked_example():
    srf = SrfMatrix(data=[[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], grid=[500.0, 600.0, 700.0])
    msi = MsiImage.from_columns([1.0, 1.0])
    prior = PriorCube(grid=[500.0, 600.0, 700.0], data=[1.0, 1.0, 1.0])
    return srf, msi, prior


def test_worked_example_closed_form():
    srf, msi, prior = _worked_example()
    coeffs = compute_coefficients(srf, msi, prior)
    assert coeffs.alpha[0] == pytest.approx(4 / 3, abs=1e-12)
    assert coeffs.gamma[0] == pytest.approx(2 / 3, abs=1e-12)
    assert coeffs.beta[0] == pytest.approx(1 / 3, abs=1e-12)
    assert coeffs.xi_star[0] == pytest.approx(0.5, abs=1e-12)

    result = project(prior, srf, msi)
    np.testing.assert_allclose(result.y_star.columns()[:, 0], [0.5, 0.5, 0.5], atol=1e-12)
    assert result.fallback_count == 0

    oracle = oracle_project(prior.data[:, 0], srf, msi.columns()[:, 0])
    np.testing.assert_allclose(oracle, [0.5, 0.5, 0.5], atol=1e-9)


def test_matches_numerical_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        srf, msi, prior, _ = _instance(rng)
        y = project(prior, srf, msi).y_star.columns()
        x = msi.columns()
        for n in range(x.shape[1]):
            oracle = oracle_project(prior.data[:, n], srf, x[:, n], restarts=1)
            assert _angle(y[:, n], oracle) <= 1e-6
            np.testing.assert_allclose(srf.data @ oracle, x[:, n], atol=1e-10)


def test_projection_properties():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        srf, msi, prior, truth = _instance(rng)
        projector = GuidanceProjector(srf)
        result = projector.project(prior, msi)
        y = result.y_star.columns()
        x = msi.columns()
        assert np.abs(srf.data @ y - x).max() <= 1e-10

        # 実行可能な事前分布は不動点
        fixed = projector.project(PriorCube(grid=srf.grid, data=truth), msi).y_star.columns()
        np.testing.assert_allclose(fixed, truth, atol=1e-9)

        # 冪等性
        again = projector.project(PriorCube(grid=srf.grid, data=y), msi).y_star.columns()
        np.testing.assert_allclose(again, y, atol=1e-9)

        # 画素ごとの正のスケールに不変
        scales = rng.uniform(0.1, 10.0, prior.n_pixels)
        scaled = projector.project(PriorCube(grid=srf.grid, data=prior.data * scales), msi).y_star.columns()
        np.testing.assert_allclose(scaled, y, atol=1e-9)

        # 事前分布とのコサインは真値より悪くない
        for n in range(0, y.shape[1], 5):
            assert _angle(y[:, n], prior.data[:, n]) <= _angle(truth[:, n], prior.data[:, n]) + 1e-12


def _cosines(y, z):
    return (z @ y) / (np.linalg.norm(y, axis=0) * np.linalg.norm(z))


def test_no_feasible_competitor_beats_projection():
    rng = np.random.default_rng(13)
    for _ in range(5):
        srf, msi, prior, _ = _instance(rng)
        s = srf.data
        y_star = project(prior, srf, msi).y_star.columns()
        pinv = s.T @ np.linalg.inv(s @ s.T)
        null_proj = np.eye(s.shape[1]) - pinv @ s
        x = msi.columns()
        for n in range(x.shape[1]):
            # いろいろな大きさの零空間方向
            v = rng.standard_normal((s.shape[1], 10_000)) * rng.uniform(0.01, 10.0, 10_000)
            competitors = (pinv @ x[:, n])[:, None] + null_proj @ v
            np.testing.assert_allclose(s @ competitors[:, :3], np.repeat(x[:, n:n + 1], 3, axis=1), atol=1e-9)
            best = _cosines(y_star[:, n:n + 1], prior.data[:, n])[0]
            assert _cosines(competitors, prior.data[:, n]).max() <= best + 1e-12


def test_sign_flipped_prior_falls_back():
    rng = np.random.default_rng(17)
    srf, msi, prior, _ = _instance(rng)
    flipped_data = prior.data.copy()
    flipped_data[:, 0] *= -1.0
    flipped = PriorCube(grid=srf.grid, data=flipped_data)

    before = compute_coefficients(srf, msi, prior)
    after = compute_coefficients(srf, msi, flipped)
    assert before.assumption_ok[0] and not after.assumption_ok[0]
    assert after.alpha[0] == pytest.approx(-before.alpha[0], rel=1e-12)
    assert after.beta[0] == pytest.approx(before.beta[0], rel=1e-12)
    assert after.gamma[0] == pytest.approx(before.gamma[0], rel=1e-12)
    np.testing.assert_array_equal(after.assumption_ok[1:], before.assumption_ok[1:])

    result = project(flipped, srf, msi)
    assert result.fallback_count == 1
    np.testing.assert_allclose(
        result.y_star.columns()[:, 0],
        min_norm_solution(srf, msi).columns()[:, 0],
        atol=1e-12,
    )


def test_zero_prior_equals_minimum_norm():
    rng = np.random.default_rng(3)
    srf, msi, _, _ = _instance(rng)
    result = project(PriorCube.zeros(srf.grid), srf, msi)
    expected = srf.data.T @ np.linalg.solve(srf.data @ srf.data.T, msi.columns())
    np.testing.assert_allclose(result.y_star.columns(), expected, atol=1e-12)
    np.testing.assert_allclose(min_norm_solution(srf, msi).columns(), expected, atol=1e-12)
    assert result.fallback_count == msi.n_pixels


def test_broadcast_prior_matches_repeated_prior():
    rng = np.random.default_rng(5)
    srf, msi, prior, _ = _instance(rng)
    single = PriorCube(grid=srf.grid, data=prior.data[:, :1])
    repeated = PriorCube(grid=srf.grid, data=np.repeat(prior.data[:, :1], msi.n_pixels, axis=1))
    np.testing.assert_array_equal(
        project(single, srf, msi).y_star.data,
        project(repeated, srf, msi).y_star.data,
    )


def test_feasibility_violation_is_raised(mocker):
    srf, msi, prior = _worked_example()
    mocker.patch.object(GuidanceProjector, "residuals", return_value=np.array([0.5]))
    with pytest.raises(FeasibilityViolation) as info:
        project(prior, srf, msi)
    assert info.value.residual == 0.5
    assert info.value.exit_code == 33


def test_input_validation():
    srf, msi, prior = _worked_example()
    with pytest.raises(RankDeficient):
        GuidanceProjector(SrfMatrix(data=[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]], grid=srf.grid))
    with pytest.raises(GridMismatch):
        project(PriorCube(grid=[500.0, 600.0, 710.0], data=[1.0, 1.0, 1.0]), srf, msi)
    with pytest.raises(ShapeMismatch):
        project(prior, srf, MsiImage.from_columns([1.0, 1.0, 1.0]))
    with pytest.raises(ShapeMismatch):
        project(PriorCube(grid=srf.grid, data=np.ones((3, 2))), srf, MsiImage.from_columns(np.ones((2, 3))))
