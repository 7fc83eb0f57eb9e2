"""SSRNO 大気放射伝達 (ART) 事前分布モジュール

大気外日射スペクトルと大気透過率因子の積として地表直達日射を合成し、
任意の波長グリッド上の画素ごとのガイダンス行列 Z を生成する。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

import config
from models.spectral import PriorCube, SpectrumTable
from services.data_io import read_spectrum_csv
from services.errors import EmptySpectrum, InvalidParameter, InvalidTransmittance, OutOfRange
from services.numerics import kernel_regress

logger = logging.getLogger(__name__)

# 積を取る順序 (決定性のため固定)
FACTOR_KINDS = ("rayleigh", "ozone", "no2", "mixed_gas", "water_vapor", "aerosol")

TRANSMITTANCE_TOL = 1e-9

# 吸収帯 (中心 nm, 幅 nm, 光学的深さ)
WATER_VAPOR_BANDS = (
    (720.0, 12.0, 0.08),
    (820.0, 15.0, 0.12),
    (940.0, 25.0, 0.9),
    (1130.0, 30.0, 1.1),
    (1380.0, 45.0, 4.0),
    (1870.0, 60.0, 4.5),
    (2600.0, 120.0, 3.0),
)
MIXED_GAS_BANDS = (
    (688.0, 3.0, 0.2),
    (762.0, 4.0, 1.2),
    (1270.0, 6.0, 0.15),
    (2010.0, 12.0, 0.6),
    (2060.0, 12.0, 0.7),
)
OZONE_BANDS = (
    (300.0, 25.0, 2.5),
    (600.0, 60.0, 0.03),
)

# 太陽半径 / 1AU の二乗
_SOLAR_DILUTION = (6.957e8 / 1.496e11) ** 2
_H = 6.62607015e-34
_C = 2.99792458e8
_K = 1.380649e-23


@dataclass
class TransmittanceFactor:
    """大気透過率因子 (表または解析式)"""
    kind: str
    table: Optional[SpectrumTable] = None
    provider: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise InvalidParameter(f"未知の透過率因子: {self.kind}")
        if (self.table is None) == (self.provider is None):
            raise InvalidParameter("table と provider のどちらか一方を指定してください")
        if self.table is not None:
            values = self.table.values
            if np.any(values < -TRANSMITTANCE_TOL) or np.any(values > 1.0 + TRANSMITTANCE_TOL):
                raise InvalidTransmittance(
                    f"{self.kind}: 透過率表の値が [0,1] 外です "
                    f"(min={values.min():.3e}, max={values.max():.3e})"
                )
            self.table = SpectrumTable(
                wavelengths=self.table.wavelengths,
                values=np.clip(values, 0.0, 1.0),
            )

    def evaluate(self, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.float64)
        if self.table is not None:
            values = kernel_regress(self.table.wavelengths, self.table.values, grid)
        else:
            values = np.asarray(self.provider(grid), dtype=np.float64)
        if np.any(values < -TRANSMITTANCE_TOL) or np.any(values > 1.0 + TRANSMITTANCE_TOL):
            raise InvalidTransmittance(f"{self.kind}: 透過率が [0,1] 外です")
        return np.clip(values, 0.0, 1.0)


def _check_airmass(airmass: float):
    if airmass < 0 or not np.isfinite(airmass):
        raise InvalidParameter(f"エアマスは非負の有限値が必要です: {airmass}")


def _check_grid(grid: np.ndarray):
    lo, hi = config.VALID_RANGE_NM
    if grid.size == 0:
        raise EmptySpectrum("波長グリッドが空です")
    if grid.min() < lo or grid.max() > hi:
        raise OutOfRange(
            f"波長 [{grid.min():.1f}, {grid.max():.1f}] nm が有効範囲 [{lo:.0f}, {hi:.0f}] nm 外です"
        )


# ──────────────────────────────────────────
# 解析的透過率
# ──────────────────────────────────────────

def rayleigh_transmittance(grid, airmass: float) -> TransmittanceFactor:
    """レイリー散乱 T_R(λ) = exp(−m · 0.008735 · λ_µm^(−4.08))"""
    _check_airmass(airmass)

    def provider(wl: np.ndarray) -> np.ndarray:
        lam_um = np.asarray(wl, dtype=np.float64) / 1000.0
        return np.clip(np.exp(-airmass * 0.008735 * lam_um ** (-4.08)), 0.0, 1.0)

    factor = TransmittanceFactor(kind="rayleigh", provider=provider, params={"airmass": airmass})
    # グリッド上で評価できることを確認
    factor.evaluate(grid)
    return factor


def aerosol_transmittance(grid, airmass: float, beta: float = 0.1, alpha: float = 1.3) -> TransmittanceFactor:
    """エアロゾル消散 (Ångström 則) T_a(λ) = exp(−m · β · λ_µm^(−α))"""
    _check_airmass(airmass)
    if beta < 0:
        raise InvalidParameter(f"混濁係数 β は非負が必要です: {beta}")

    def provider(wl: np.ndarray) -> np.ndarray:
        lam_um = np.asarray(wl, dtype=np.float64) / 1000.0
        return np.clip(np.exp(-airmass * beta * lam_um ** (-alpha)), 0.0, 1.0)

    factor = TransmittanceFactor(
        kind="aerosol", provider=provider, params={"airmass": airmass, "beta": beta, "alpha": alpha}
    )
    factor.evaluate(grid)
    return factor


def absorption_band_transmittance(
    kind: str,
    grid,
    airmass: float,
    bands: Optional[tuple] = None,
) -> TransmittanceFactor:
    """ガウス形の光学的深さを持つ吸収帯の透過率

    T(λ) = exp(−m · Σ_j d_j · exp(−(λ−c_j)² / 2w_j²))
    """
    _check_airmass(airmass)
    if bands is None:
        bands = {
            "water_vapor": WATER_VAPOR_BANDS,
            "mixed_gas": MIXED_GAS_BANDS,
            "ozone": OZONE_BANDS,
        }.get(kind, ())
    bands = tuple(bands)

    def provider(wl: np.ndarray) -> np.ndarray:
        wl = np.asarray(wl, dtype=np.float64)
        depth = np.zeros_like(wl)
        for center, width, d in bands:
            depth += d * np.exp(-0.5 * ((wl - center) / width) ** 2)
        return np.exp(-airmass * depth)

    factor = TransmittanceFactor(kind=kind, provider=provider, params={"airmass": airmass, "bands": bands})
    factor.evaluate(grid)
    return factor


def load_factor_table(kind: str, path) -> TransmittanceFactor:
    """CSV の透過率表から因子を作る"""
    return TransmittanceFactor(kind=kind, table=read_spectrum_csv(path), params={"source": str(path)})


def extraterrestrial_blackbody(grid, temperature: float = 5778.0) -> SpectrumTable:
    """1AU における太陽円盤の黒体スペクトル (W·m⁻²·nm⁻¹)"""
    wl = np.asarray(grid, dtype=np.float64)
    lam = wl * 1e-9
    radiance = 2.0 * _H * _C ** 2 / lam ** 5 / np.expm1(_H * _C / (lam * _K * temperature))
    irradiance = np.pi * _SOLAR_DILUTION * radiance * 1e-9
    return SpectrumTable(wavelengths=wl, values=irradiance)


# ──────────────────────────────────────────
# 合成
# ──────────────────────────────────────────

def _resample(table: SpectrumTable, grid: np.ndarray) -> np.ndarray:
    if len(table) == 0:
        raise EmptySpectrum("スペクトル表が空です")
    if np.array_equal(table.wavelengths, grid):
        return table.values.copy()
    return kernel_regress(table.wavelengths, table.values, grid)


def compose_beam_irradiance(
    e_on: SpectrumTable,
    factors: list[TransmittanceFactor],
    grid,
) -> SpectrumTable:
    """地表直達日射 E_bn = E_on · T_R · T_o · T_n · T_g · T_w · T_a

    因子の積は FACTOR_KINDS の固定順で取るため、入力順序に依らず同一の結果になる。

    Raises:
        OutOfRange: グリッドが 280–4000 nm 外
        InvalidTransmittance: 透過率が [0,1] 外
    """
    grid = np.asarray(grid, dtype=np.float64)
    _check_grid(grid)
    if np.any(e_on.values < 0):
        raise InvalidParameter("大気外日射に負の値があります")

    evaluated = [(FACTOR_KINDS.index(f.kind), f.evaluate(grid)) for f in factors]
    evaluated.sort(key=lambda item: (item[0], item[1].tobytes()))

    result = _resample(e_on, grid)
    for _, values in evaluated:
        result = result * values
    logger.debug(f"直達日射合成: 因子{len(factors)}個, {grid.size}バンド")
    return SpectrumTable(wavelengths=grid, values=result)


def reference_beam_irradiance(grid, airmass: float = 1.5) -> SpectrumTable:
    """解析的因子のみで合成した参照直達日射 (ユーザー表がない場合の既定 ART 事前分布)"""
    grid = np.asarray(grid, dtype=np.float64)
    factors = [
        rayleigh_transmittance(grid, airmass),
        absorption_band_transmittance("ozone", grid, airmass),
        absorption_band_transmittance("mixed_gas", grid, airmass),
        absorption_band_transmittance("water_vapor", grid, airmass),
        aerosol_transmittance(grid, airmass),
    ]
    return compose_beam_irradiance(extraterrestrial_blackbody(grid), factors, grid)


def build_prior_cube(e_bn: SpectrumTable, grid, n_pixels: int) -> PriorCube:
    """直達日射を最大値1に正規化し、全画素にブロードキャスト

    Raises:
        EmptySpectrum: スペクトルが空、または再サンプリング後に全てゼロ
    """
    if n_pixels < 1:
        raise InvalidParameter(f"画素数は1以上が必要です: {n_pixels}")
    grid = np.asarray(grid, dtype=np.float64)
    values = _resample(e_bn, grid)
    peak = float(values.max()) if values.size else 0.0
    if not peak > 0:
        raise EmptySpectrum("直達日射が全てゼロです")
    shape = values / peak
    return PriorCube(grid=grid, data=np.repeat(shape[:, None], n_pixels, axis=1))
