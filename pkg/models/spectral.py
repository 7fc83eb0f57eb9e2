"""SSRNO データモデル定義

ハイパースペクトル画像 (HSI)、マルチスペクトル画像 (MSI)、
分光応答関数 (SRF)、スペクトル表、ガイダンス事前分布を
numpy 配列で保持するためのコンテナ。
"""
from dataclasses import dataclass, field

import numpy as np

from services.errors import ShapeMismatch


def _as_grid(values) -> np.ndarray:
    grid = np.asarray(values, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ShapeMismatch("波長グリッドが空です")
    if not np.all(np.isfinite(grid)):
        raise ShapeMismatch("波長グリッドに有限でない値があります")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise ShapeMismatch("波長グリッドが狭義単調増加ではありません")
    return grid


@dataclass
class HsiCube:
    """ハイパースペクトル画像 (C×H×W) と波長グリッド (nm)"""
    grid: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.grid = _as_grid(self.grid)
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"HSI は3次元 (C,H,W) が必要です: {self.data.shape}")
        if self.data.shape[0] != self.grid.size:
            raise ShapeMismatch(
                f"バンド数 {self.data.shape[0]} と波長数 {self.grid.size} が不一致"
            )

    @property
    def c_bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def columns(self) -> np.ndarray:
        """C×N 行列として参照 (N = H·W, 行優先)"""
        return self.data.reshape(self.c_bands, self.n_pixels)

    def with_data(self, data: np.ndarray) -> "HsiCube":
        return HsiCube(grid=self.grid.copy(), data=data)

    def select_bands(self, indices) -> "HsiCube":
        idx = np.asarray(indices, dtype=np.int64)
        return HsiCube(grid=self.grid[idx], data=self.data[idx])


@dataclass
class MsiImage:
    """マルチスペクトル観測 X (M×H×W)"""
    data: np.ndarray
    srf_name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"MSI は3次元 (M,H,W) が必要です: {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("MSI に有限でない値があります")

    @property
    def m_bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def columns(self) -> np.ndarray:
        return self.data.reshape(self.m_bands, self.n_pixels)

    @classmethod
    def from_columns(cls, columns, srf_name: str = "") -> "MsiImage":
        """M×N 行列を高さ1の画像として包む"""
        mat = np.asarray(columns, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat[:, None]
        return cls(data=mat.reshape(mat.shape[0], 1, mat.shape[1]), srf_name=srf_name)


@dataclass
class SrfBand:
    """1バンド分の分光感度カーブ"""
    label: str
    wavelengths: np.ndarray
    sensitivities: np.ndarray


@dataclass
class SrfCurveSet:
    """1センサー分の SRF カーブ集合"""
    name: str
    bands: list[SrfBand] = field(default_factory=list)

    @property
    def m_bands(self) -> int:
        return len(self.bands)


@dataclass
class SrfMatrix:
    """離散化済み SRF 行列 S (M×C)"""
    data: np.ndarray
    grid: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.grid = _as_grid(self.grid)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.grid.size:
            raise ShapeMismatch(
                f"SRF 行列形状 {self.data.shape} と波長数 {self.grid.size} が不一致"
            )
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("SRF 行列に有限でない値があります")

    @property
    def m_bands(self) -> int:
        return self.data.shape[0]

    @property
    def c_bands(self) -> int:
        return self.data.shape[1]


@dataclass
class SpectrumTable:
    """波長 (nm) と値の表 (放射照度・透過率など)"""
    wavelengths: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.wavelengths.size != self.values.size:
            raise ShapeMismatch("波長数と値の数が不一致です")
        if self.wavelengths.size > 1 and not np.all(np.diff(self.wavelengths) > 0):
            raise ShapeMismatch("スペクトル表の波長が狭義単調増加ではありません")

    def __len__(self) -> int:
        return int(self.wavelengths.size)


@dataclass
class PriorCube:
    """ガイダンス行列 Z (C×N)。N=1 はシーン全体へのブロードキャスト"""
    grid: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.grid = _as_grid(self.grid)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.ndim != 2 or self.data.shape[0] != self.grid.size:
            raise ShapeMismatch(
                f"事前分布形状 {self.data.shape} と波長数 {self.grid.size} が不一致"
            )

    @property
    def c_bands(self) -> int:
        return self.data.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_cube(cls, cube: HsiCube) -> "PriorCube":
        return cls(grid=cube.grid.copy(), data=cube.columns().astype(np.float64))

    @classmethod
    def zeros(cls, grid, n_pixels: int = 1) -> "PriorCube":
        grid = _as_grid(grid)
        return cls(grid=grid, data=np.zeros((grid.size, n_pixels)))
