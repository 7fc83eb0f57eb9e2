"""SSRNO 分光応答関数 (SRF) レジストリ

SRF データベースの読み込み、波長グリッドへの離散化・行正規化、
劣化モデル SY = X の適用、行フルランク検査を行う。
"""
import logging
from pathlib import Path
from typing import Optional

import numpy as np

import config
from models.spectral import HsiCube, MsiImage, SrfBand, SrfCurveSet, SrfMatrix
from services.data_io import read_srf_csv
from services.errors import DegenerateBand, GridMismatch, IoError, ParseError, RankDeficient
from services.numerics import default_bandwidth, kernel_regress

logger = logging.getLogger(__name__)

# 行和がこれ未満の行は退化バンドとして拒否
DEGENERATE_ROW_SUM = 1e-8


class RankReport:
    """行フルランク検査の結果"""

    def __init__(self, smallest: float, largest: float, tolerance: float):
        self.smallest_singular = smallest
        self.largest_singular = largest
        self.tolerance = tolerance
        self.passed = largest > 0 and smallest > tolerance * largest

    def __repr__(self):
        status = "pass" if self.passed else "fail"
        return f"<RankReport {status} σmin={self.smallest_singular:.3e} σmax={self.largest_singular:.3e}>"


def load_srf_database(path) -> list[SrfCurveSet]:
    """SRF データベースを読み込み

    Args:
        path: CSV ファイル (1センサー) または CSV を含むディレクトリ
    Returns:
        センサーごとの SrfCurveSet リスト (名前順)
    """
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.csv"))
        if not files:
            raise ParseError(f"SRF CSV が見つかりません: {p}")
    elif p.is_file():
        files = [p]
    else:
        raise IoError(f"SRF データベースが存在しません: {p}")

    database = [read_srf_csv(f) for f in files]
    logger.info(f"SRF データベース読み込み: {len(database)}センサー ({p})")
    return database


def find_sensor(database: list[SrfCurveSet], name: str) -> SrfCurveSet:
    """名前でセンサーを検索"""
    for curves in database:
        if curves.name == name:
            return curves
    raise ParseError(f"センサー {name!r} がデータベースにありません")


def choose_srf(database: list[SrfCurveSet], rng: np.random.Generator) -> SrfCurveSet:
    """シーンごとに一様ランダムにセンサーを選ぶ"""
    if not database:
        raise ParseError("SRF データベースが空です")
    return database[int(rng.integers(len(database)))]


def discretize_srf(
    curves: SrfCurveSet,
    grid,
    bandwidth: Optional[float] = None,
    drop_degenerate: bool = False,
) -> SrfMatrix:
    """SRF カーブを波長グリッドに離散化し行和1に正規化

    各バンドをカーネル回帰でグリッドに写し、行和で割る。
    drop_degenerate=True ならグリッド上で感度を持たないバンドを除外する
    (部分波長域での学習用)。

    Raises:
        DegenerateBand: 正規化前の行和が 1e-8 未満 (除外後に1行も残らない場合も)
        RankDeficient: 正規化後に行フルランクでない
    """
    grid = np.asarray(grid, dtype=np.float64)
    rows = []
    for band in curves.bands:
        h = bandwidth if bandwidth is not None else default_bandwidth(band.wavelengths)
        row = np.clip(kernel_regress(band.wavelengths, band.sensitivities, grid, h), 0.0, None)
        total = row.sum()
        if total < DEGENERATE_ROW_SUM:
            if drop_degenerate:
                logger.warning(f"{curves.name}: バンド {band.label} はグリッド上で感度がないため除外")
                continue
            raise DegenerateBand(
                f"{curves.name}: バンド {band.label} の行和 {total:.3e} がほぼゼロです",
                band=band.label,
            )
        rows.append(row / total)
    if not rows:
        raise DegenerateBand(f"{curves.name}: グリッド上で有効なバンドがありません")

    matrix = SrfMatrix(data=np.vstack(rows), grid=grid, name=curves.name)
    report = check_full_row_rank(matrix)
    if not report.passed:
        raise RankDeficient(
            f"{curves.name}: 行フルランクではありません "
            f"(σmin={report.smallest_singular:.3e}, σmax={report.largest_singular:.3e})"
        )
    logger.debug(f"SRF 離散化: {curves.name} {matrix.m_bands}×{matrix.c_bands}")
    return matrix


def check_full_row_rank(srf: SrfMatrix) -> RankReport:
    """SSᵀ の対称固有値分解から最小・最大特異値を求めて判定

    固有値の丸め誤差 (M·16ε·λmax 以下) はゼロとみなす。
    """
    gram = srf.data @ srf.data.T
    eigenvalues = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    noise_floor = 16.0 * np.finfo(np.float64).eps * srf.m_bands * max(float(eigenvalues.max()), 0.0)
    eigenvalues = np.where(eigenvalues > noise_floor, eigenvalues, 0.0)
    singular = np.sqrt(eigenvalues)
    return RankReport(
        smallest=float(singular.min()),
        largest=float(singular.max()),
        tolerance=config.RANK_TOL,
    )


def degrade(srf: SrfMatrix, cube: HsiCube) -> MsiImage:
    """劣化モデル X[m,h,w] = Σ_c S[m,c]·Y[c,h,w]"""
    if srf.c_bands != cube.c_bands or not np.allclose(srf.grid, cube.grid, rtol=0, atol=1e-9):
        raise GridMismatch(
            f"SRF グリッド ({srf.c_bands}バンド) と HSI グリッド ({cube.c_bands}バンド) が不一致"
        )
    data = np.tensordot(srf.data, cube.data, axes=(1, 0))
    return MsiImage(data=data.astype(cube.data.dtype, copy=False), srf_name=srf.name)


# ──────────────────────────────────────────
# 組み込みセンサー
# ──────────────────────────────────────────

def random_srf_curves(
    rng: np.random.Generator,
    name: str,
    m_bands: int = 4,
    lo: float = config.SYNTH_RANGE_NM[0],
    hi: float = config.SYNTH_RANGE_NM[1],
    samples: int = 106,
) -> SrfCurveSet:
    """ガウス形の広帯域感度を持つ擬似センサー

    中心はレンジを M 等分した区間内でランダム、幅は区間幅程度。
    """
    wl = np.linspace(lo, hi, samples)
    width = (hi - lo) / m_bands
    bands = []
    for m in range(m_bands):
        center = lo + width * (m + rng.uniform(0.25, 0.75))
        sigma = width * rng.uniform(0.35, 0.8)
        peak = rng.uniform(0.6, 1.0)
        sens = peak * np.exp(-0.5 * ((wl - center) / sigma) ** 2)
        bands.append(SrfBand(label=f"band_{m + 1}", wavelengths=wl.copy(), sensitivities=sens))
    return SrfCurveSet(name=name, bands=bands)


def builtin_srf_database(seed: int = 0, count: int = 28, m_bands: int = 4) -> list[SrfCurveSet]:
    """シード固定の組み込み SRF データベース"""
    rng = np.random.default_rng(seed)
    return [random_srf_curves(rng, f"sensor_{i:02d}", m_bands) for i in range(count)]
