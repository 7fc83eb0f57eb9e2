"""SSRNO ガイダンス行列射影 (GMP)

事前分布 Z を解空間 {Y : SY = X} へ射影し、画素ごとに Z とのコサイン類似度を
最大化する閉形式解

    Y*_{·n} = S†X_{·n} + P_S Z_{·n} · γ_n/α_n
    S† = Sᵀ(SSᵀ)⁻¹,  P_S = I − Sᵀ(SSᵀ)⁻¹S

を計算する。前提条件 (α, β, γ > ε) を満たさない画素は最小ノルム解 S†X に
フォールバックする。
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import null_space

import config
from models.spectral import HsiCube, MsiImage, PriorCube, SrfMatrix
from services.errors import (
    FeasibilityViolation,
    GridMismatch,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficient,
    ShapeMismatch,
)
from services.numerics import SpdFactor

logger = logging.getLogger(__name__)


@dataclass
class GmpCoefficients:
    """画素ごとの α, β, γ と ξ* = γ/α"""
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    xi_star: np.ndarray
    assumption_ok: np.ndarray


@dataclass
class ProjectionResult:
    """GMP の射影結果"""
    y_star: HsiCube
    coeffs: GmpCoefficients
    fallback_count: int
    feasibility_residual: float


class GuidanceProjector:
    """SRF ごとに SSᵀ を一度だけ分解して全画素で再利用する射影器"""

    def __init__(self, srf: SrfMatrix):
        self.srf = srf
        s = srf.data
        try:
            self._gram = SpdFactor(s @ s.T)
        except NotPositiveDefinite as e:
            raise RankDeficient(f"SRF {srf.name!r} は行フルランクではありません: {e.message}") from e

    # ──────────────────────────────────────────
    # 行列レベル
    # ──────────────────────────────────────────

    def _check_shapes(self, x_cols: np.ndarray, z_cols: Optional[np.ndarray]):
        m, c = self.srf.data.shape
        if x_cols.shape[0] != m:
            raise ShapeMismatch(f"MSI バンド数 {x_cols.shape[0]} != SRF 行数 {m}")
        if z_cols is not None:
            if z_cols.shape[0] != c:
                raise ShapeMismatch(f"事前分布バンド数 {z_cols.shape[0]} != SRF 列数 {c}")
            if z_cols.shape[1] not in (1, x_cols.shape[1]):
                raise ShapeMismatch(
                    f"事前分布の画素数 {z_cols.shape[1]} が MSI 画素数 {x_cols.shape[1]} と不一致"
                )

    def coefficients_columns(self, x_cols: np.ndarray, z_cols: np.ndarray) -> tuple[GmpCoefficients, dict]:
        """列行列 X (M×N), Z (C×N) から係数と中間量を計算"""
        x_cols = np.asarray(x_cols, dtype=np.float64)
        z_cols = np.asarray(z_cols, dtype=np.float64)
        self._check_shapes(x_cols, z_cols)
        if z_cols.shape[1] != x_cols.shape[1]:
            z_cols = np.broadcast_to(z_cols, (z_cols.shape[0], x_cols.shape[1]))

        s = self.srf.data
        gx = self._gram.solve(x_cols)           # (SSᵀ)⁻¹X
        sz = s @ z_cols
        gsz = self._gram.solve(sz)              # (SSᵀ)⁻¹SZ
        null_part = z_cols - s.T @ gsz          # P_S Z

        gamma = np.einsum("mn,mn->n", x_cols, gx)
        alpha = np.einsum("mn,mn->n", gx, sz)
        beta = np.einsum("cn,cn->n", z_cols, null_part)

        eps = config.ASSUMPTION_EPS
        ok = (alpha > eps) & (beta > eps) & (gamma > eps)
        xi = np.zeros_like(alpha)
        np.divide(gamma, alpha, out=xi, where=ok)

        coeffs = GmpCoefficients(alpha=alpha, beta=beta, gamma=gamma, xi_star=xi, assumption_ok=ok)
        return coeffs, {"gx": gx, "null_part": null_part}

    def project_columns(self, x_cols: np.ndarray, z_cols: np.ndarray) -> tuple[np.ndarray, GmpCoefficients]:
        coeffs, parts = self.coefficients_columns(x_cols, z_cols)
        y = self.srf.data.T @ parts["gx"]
        y += parts["null_part"] * np.where(coeffs.assumption_ok, coeffs.xi_star, 0.0)[None, :]
        return y, coeffs

    def min_norm_columns(self, x_cols: np.ndarray) -> np.ndarray:
        x_cols = np.asarray(x_cols, dtype=np.float64)
        self._check_shapes(x_cols, None)
        return self.srf.data.T @ self._gram.solve(x_cols)

    def residuals(self, y_cols: np.ndarray, x_cols: np.ndarray) -> np.ndarray:
        """画素ごとの ‖SY_{·n} − X_{·n}‖_∞"""
        return np.abs(self.srf.data @ y_cols - x_cols).max(axis=0)

    # ──────────────────────────────────────────
    # 画像レベル
    # ──────────────────────────────────────────

    def _check_grid(self, prior: PriorCube):
        if prior.c_bands != self.srf.c_bands or not np.allclose(prior.grid, self.srf.grid, rtol=0, atol=1e-9):
            raise GridMismatch("事前分布と SRF の波長グリッドが不一致です")

    def compute_coefficients(self, msi: MsiImage, prior: PriorCube) -> GmpCoefficients:
        self._check_grid(prior)
        coeffs, _ = self.coefficients_columns(msi.columns(), prior.data)
        return coeffs

    def project(self, prior: PriorCube, msi: MsiImage, tolerance: Optional[float] = None) -> ProjectionResult:
        """閉形式射影

        Raises:
            FeasibilityViolation: 相対残差が許容値を超えた (数値破綻)
        """
        tol = config.GMP_TOLERANCE if tolerance is None else tolerance
        self._check_grid(prior)
        x_cols = msi.columns().astype(np.float64)
        y_cols, coeffs = self.project_columns(x_cols, prior.data)

        fallback = int((~coeffs.assumption_ok).sum())
        if fallback:
            logger.debug(f"GMP: {fallback}/{x_cols.shape[1]} 画素が最小ノルム解にフォールバック")

        residual = self.residuals(y_cols, x_cols)
        scale = np.maximum(1.0, np.abs(x_cols).max(axis=0))
        if residual.size and np.max(residual / scale) > tol:
            raise FeasibilityViolation(float(residual.max()), tol)

        cube = HsiCube(grid=self.srf.grid.copy(), data=y_cols.reshape(-1, msi.height, msi.width))
        return ProjectionResult(
            y_star=cube,
            coeffs=coeffs,
            fallback_count=fallback,
            feasibility_residual=float(residual.max()) if residual.size else 0.0,
        )

    def min_norm(self, msi: MsiImage) -> HsiCube:
        y = self.min_norm_columns(msi.columns())
        return HsiCube(grid=self.srf.grid.copy(), data=y.reshape(-1, msi.height, msi.width))


# ──────────────────────────────────────────
# 関数インターフェース
# ──────────────────────────────────────────

def compute_coefficients(srf: SrfMatrix, msi: MsiImage, prior: PriorCube) -> GmpCoefficients:
    """画素ごとの α_n, β_n, γ_n を計算"""
    return GuidanceProjector(srf).compute_coefficients(msi, prior)


def project(
    prior: PriorCube,
    srf: SrfMatrix,
    msi: MsiImage,
    tolerance: Optional[float] = None,
    projector: Optional[GuidanceProjector] = None,
) -> ProjectionResult:
    """P_GMP(Z, S, X)"""
    projector = projector or GuidanceProjector(srf)
    return projector.project(prior, msi, tolerance)


def min_norm_solution(srf: SrfMatrix, msi: MsiImage) -> HsiCube:
    """Moore-Penrose 解 Sᵀ(SSᵀ)⁻¹X"""
    return GuidanceProjector(srf).min_norm(msi)


# ──────────────────────────────────────────
# 検証オラクル
# ──────────────────────────────────────────

def _cosine_and_grad(u, y0, basis, z, z_norm):
    y = y0 + basis @ u
    y_norm = np.linalg.norm(y)
    cos = float(y @ z) / (y_norm * z_norm)
    grad_y = z / (y_norm * z_norm) - cos * y / y_norm ** 2
    return cos, basis.T @ grad_y, y_norm


def _ascend(u, y0, basis, z, z_norm, max_iter, tol):
    f, g, y_norm = _cosine_and_grad(u, y0, basis, z, z_norm)
    step = y_norm ** 2
    for it in range(max_iter):
        if np.linalg.norm(g) * y_norm <= tol:
            return u, f, True, it
        t = step
        while True:
            u_new = u + t * g
            f_new, g_new, y_norm_new = _cosine_and_grad(u_new, y0, basis, z, z_norm)
            # 丸め誤差を超える減少のときだけ縮める
            if f_new >= f - 1e-12 or t < 1e-300:
                break
            t *= 0.5
        s = u_new - u
        curvature = -float(s @ (g_new - g))
        step = float(s @ s) / curvature if curvature > 0 else y_norm_new ** 2
        u, f, g, y_norm = u_new, f_new, g_new, y_norm_new
    return u, f, np.linalg.norm(g) * y_norm <= tol, max_iter


def oracle_project(
    z_col,
    srf: SrfMatrix,
    x_col,
    restarts: int = config.ORACLE_RESTARTS,
    max_iter: int = config.ORACLE_MAX_ITER,
    tol: float = config.ORACLE_STATIONARITY_TOL,
    seed: int = 0,
) -> np.ndarray:
    """コサイン類似度最大化を数値的に解く独立オラクル (テスト専用)

    Y = S†X + N u (N は S の零空間の正規直交基底) とパラメータ化し、
    Barzilai–Borwein ステップ幅の勾配上昇を複数初期点から行う。

    Raises:
        NoConvergence: どの初期点も停留条件に達しない
    """
    s = srf.data
    z = np.asarray(z_col, dtype=np.float64).reshape(-1)
    x = np.asarray(x_col, dtype=np.float64).reshape(-1)
    y0 = np.linalg.lstsq(s, x, rcond=None)[0]
    basis = null_space(s)
    z_norm = np.linalg.norm(z)

    rng = np.random.default_rng(seed)
    scale = max(np.linalg.norm(y0), 1e-12)
    starts = [np.zeros(basis.shape[1])]
    starts += [rng.standard_normal(basis.shape[1]) * scale for _ in range(max(0, restarts - 1))]

    best = None
    for u0 in starts:
        u, f, converged, iters = _ascend(u0, y0, basis, z, z_norm, max_iter, tol)
        if converged and (best is None or f > best[1]):
            best = (u, f)
    if best is None:
        raise NoConvergence(f"オラクルが {max_iter} 反復で収束しませんでした")
    return y0 + basis @ best[0]
