"""SSRNO 数値計算カーネル

対称正定値ソルバ、スペクトル軸の実数FFT、カーネル回帰による
再サンプリング、中心差分による勾配チェッカーを提供する。
逆行列は明示的に作らず、(SSᵀ)⁻¹v は必ず Cholesky 分解経由で解く。
"""
import logging
from typing import Callable, Optional

import numpy as np
from scipy import fft as sp_fft
from scipy.linalg import LinAlgError, cho_factor, cho_solve

import config
from services.errors import EmptySamples, NonFiniteValue, NotPositiveDefinite, ShapeMismatch

logger = logging.getLogger(__name__)


# ──────────────────────────────────────────
# 対称正定値ソルバ
# ──────────────────────────────────────────

class SpdFactor:
    """対称正定値行列の Cholesky 分解を保持し、繰り返し解く

    GMP では SRF ごとに SSᵀ を一度だけ分解し、全画素で再利用する。
    """

    def __init__(self, matrix: np.ndarray):
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeMismatch(f"正方行列が必要です: {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NotPositiveDefinite("行列に有限でない値があります")
        if not np.allclose(a, a.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(a).max())):
            raise NotPositiveDefinite("行列が対称ではありません")

        max_diag = float(np.max(np.diag(a))) if a.size else 0.0
        if max_diag <= 0.0:
            raise NotPositiveDefinite("対角成分が正ではありません")

        try:
            self._factor = cho_factor(a, lower=True, check_finite=False)
        except LinAlgError as e:
            raise NotPositiveDefinite(f"Cholesky 分解に失敗: {e}") from e

        # ピボット = L の対角の二乗
        pivots = np.diag(self._factor[0]) ** 2
        tol = config.SPD_PIVOT_TOL * max_diag
        if np.any(pivots <= tol):
            raise NotPositiveDefinite(
                f"ピボット {pivots.min():.3e} が許容 {tol:.3e} 以下です",
                min_pivot=float(pivots.min()),
            )
        self.size = a.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.asarray(rhs, dtype=np.float64)
        if b.shape[0] != self.size:
            raise ShapeMismatch(f"右辺の行数 {b.shape[0]} != {self.size}")
        return cho_solve(self._factor, b, check_finite=False)


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """AX = B を対称正定値 A について解く

    Raises:
        NotPositiveDefinite: 分解のピボットが 1e-12 × 最大対角成分以下
    """
    return SpdFactor(a).solve(b)


# ──────────────────────────────────────────
# スペクトル軸 FFT
# ──────────────────────────────────────────

def n_modes(bands: int) -> int:
    """半スペクトル長 ⌊C/2⌋+1"""
    return bands // 2 + 1


def rfft_bands(x: np.ndarray) -> np.ndarray:
    """最終軸 (バンド軸) に沿った実数入力 FFT (float32 入力は complex64 のまま)"""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ShapeMismatch("バンド数は1以上が必要です")
    return sp_fft.rfft(x, axis=-1)


def irfft_bands(spectrum: np.ndarray, bands: int) -> np.ndarray:
    """rfft_bands の逆変換"""
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != n_modes(bands):
        raise ShapeMismatch(
            f"モード数 {spectrum.shape[-1]} は bands={bands} に対して {n_modes(bands)} であるべきです"
        )
    return sp_fft.irfft(spectrum, n=bands, axis=-1)


# ──────────────────────────────────────────
# カーネル回帰
# ──────────────────────────────────────────

def default_bandwidth(wavelengths: np.ndarray) -> float:
    """サンプル間隔の中央値 (サンプル1点なら1nm)"""
    wl = np.sort(np.asarray(wavelengths, dtype=np.float64).reshape(-1))
    if wl.size < 2:
        return 1.0
    spacing = np.diff(wl)
    spacing = spacing[spacing > 0]
    return float(np.median(spacing)) if spacing.size else 1.0


def kernel_regress(
    wavelengths,
    values,
    query,
    bandwidth: Optional[float] = None,
) -> np.ndarray:
    """ガウスカーネルの Nadaraya–Watson 推定

    Args:
        wavelengths: サンプル波長 (n,)
        values: サンプル値 (n,) または (n, k)
        query: 問い合わせ波長 (q,)
        bandwidth: カーネル幅 nm (None ならサンプル間隔の中央値)
    Returns:
        (q,) または (q, k) の推定値
    """
    wl = np.asarray(wavelengths, dtype=np.float64).reshape(-1)
    vals = np.asarray(values, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if wl.size == 0:
        raise EmptySamples("カーネル回帰のサンプルが空です")
    if vals.shape[0] != wl.size:
        raise ShapeMismatch(f"波長数 {wl.size} と値の数 {vals.shape[0]} が不一致")
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(wl))):
        raise NonFiniteValue("カーネル回帰のサンプルに有限でない値があります")

    h = default_bandwidth(wl) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ShapeMismatch(f"バンド幅は正である必要があります: {h}")

    # log 領域で最大値を引いて正規化 (h→0 でも最近傍に収束)
    logits = -0.5 * ((q[:, None] - wl[None, :]) / h) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ vals


# ──────────────────────────────────────────
# 勾配チェッカー
# ──────────────────────────────────────────

def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    step: float = 1e-4,
) -> np.ndarray:
    """中心差分 (f(θ+he_i) − f(θ−he_i)) / 2h

    Raises:
        NonFiniteValue: f が有限でない値を返した
    """
    if not step > 0:
        raise ShapeMismatch(f"差分幅は正である必要があります: {step}")
    base = np.array(theta, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = float(f(base))
        flat[i] = original - step
        minus = float(f(base))
        flat[i] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteValue(f"座標 {i} で関数値が有限でありません", index=i)
        grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(base.shape)
