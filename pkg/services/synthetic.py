"""SSRNO 合成データセット生成

ガウス形のバンプを重ねた端成分スペクトルに ART 直達日射の形状を掛け
(吸収谷を刻む)、空間的に平滑化した存在量マップで混合して HSI を作る。
MSI はシーンごとにランダムに選んだ SRF で劣化させて得る。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

import config
from models.spectral import HsiCube, MsiImage, SpectrumTable, SrfCurveSet, SrfMatrix
from services.art_prior import build_prior_cube
from services.data_io import (
    read_hsi,
    read_msi,
    read_spectrum_csv,
    write_hsi,
    write_msi,
    write_spectrum_csv,
    write_srf_csv,
)
from services.errors import InvalidParameter, IoError, ParseError
from services.srf_registry import (
    choose_srf,
    degrade,
    discretize_srf,
    find_sensor,
    load_srf_database,
)

logger = logging.getLogger(__name__)

N_ENDMEMBERS = 4
N_BUMPS = 3


@dataclass
class ScenePair:
    """HSI と対応する MSI、使った SRF"""
    hsi: HsiCube
    msi: MsiImage
    srf: SrfMatrix
    curves: SrfCurveSet

    @property
    def name(self) -> str:
        return self.curves.name


def synth_grid(c_bands: int) -> np.ndarray:
    lo, hi = config.SYNTH_RANGE_NM
    return np.linspace(lo, hi, c_bands)


def _endmembers(rng: np.random.Generator, grid: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """(C, K) の非負端成分スペクトル"""
    lo, hi = config.SYNTH_RANGE_NM
    spectra = np.empty((grid.size, N_ENDMEMBERS))
    for k in range(N_ENDMEMBERS):
        amps = rng.uniform(0.2, 1.0, N_BUMPS)
        centers = rng.uniform(lo, hi, N_BUMPS)
        widths = rng.uniform(100.0, 400.0, N_BUMPS)
        bumps = amps[None, :] * np.exp(-0.5 * ((grid[:, None] - centers[None, :]) / widths[None, :]) ** 2)
        spectra[:, k] = (0.05 + bumps.sum(axis=1)) * shape
    return spectra


def _abundances(rng: np.random.Generator, size: int) -> np.ndarray:
    """(K, H, W) の平滑な存在量 (画素ごとに和1)"""
    raw = rng.random((N_ENDMEMBERS, size, size))
    sigma = max(size / 8.0, 0.5)
    smooth = np.stack([gaussian_filter(raw[k], sigma=sigma, mode="wrap") for k in range(N_ENDMEMBERS)])
    smooth = np.clip(smooth, 0.0, None) + 1e-6
    return smooth / smooth.sum(axis=0, keepdims=True)


def synth_scene(
    rng: np.random.Generator,
    size: int,
    grid: np.ndarray,
    art_shape: np.ndarray,
    curves: SrfCurveSet,
) -> ScenePair:
    cube = np.tensordot(_endmembers(rng, grid, art_shape), _abundances(rng, size), axes=(1, 0))
    peak = float(cube.max())
    if peak > 0:
        cube = cube / peak
    hsi = HsiCube(grid=grid.copy(), data=np.clip(cube, 0.0, 1.0))
    srf = discretize_srf(curves, grid)
    return ScenePair(hsi=hsi, msi=degrade(srf, hsi), srf=srf, curves=curves)


def synth_dataset(
    seed: int,
    scenes: int,
    size: int,
    c_bands: int,
    srf_db: list[SrfCurveSet],
    art: SpectrumTable,
    grid: Optional[np.ndarray] = None,
) -> list[ScenePair]:
    """シード固定の合成データセット

    Args:
        seed: 乱数シード
        scenes: シーン数
        size: 画像の一辺 (H=W)
        c_bands: バンド数 (grid 指定時は無視)
        srf_db: SRF データベース
        art: ART 直達日射 (形状のみ使用)
    """
    if scenes < 1 or size < 1:
        raise InvalidParameter(f"シーン数と画像サイズは1以上が必要です: scenes={scenes}, size={size}")
    grid = synth_grid(c_bands) if grid is None else np.asarray(grid, dtype=np.float64)
    art_shape = build_prior_cube(art, grid, 1).data[:, 0]

    rng = np.random.default_rng(seed)
    dataset = []
    for _ in range(scenes):
        curves = choose_srf(srf_db, rng)
        dataset.append(synth_scene(rng, size, grid, art_shape, curves))
    logger.info(f"合成データセット生成: {scenes}シーン, {size}×{size}, {grid.size}バンド (seed={seed})")
    return dataset


# ──────────────────────────────────────────
# 保存・読み込み
# ──────────────────────────────────────────

DATASET_INDEX = "dataset.csv"


def save_dataset(dataset: list[ScenePair], out_dir, srf_db: list[SrfCurveSet], art: SpectrumTable) -> dict[str, Path]:
    """シーンごとの HSI/MSI、SRF データベース、ART 事前分布、索引 CSV を書き出す"""
    out = Path(out_dir)
    (out / "srf").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, scene in enumerate(dataset):
        stem = f"scene_{i:03d}"
        write_hsi(scene.hsi, out / f"{stem}.hsi")
        write_msi(scene.msi, out / f"{stem}.msi")
        rows.append({"scene": stem, "hsi": f"{stem}.hsi", "msi": f"{stem}.msi", "sensor": scene.name})
    for curves in srf_db:
        write_srf_csv(curves, out / "srf" / f"{curves.name}.csv")
    write_spectrum_csv(art, out / "art_prior.csv", header_comment="ART beam irradiance")
    index = out / DATASET_INDEX
    pd.DataFrame(rows, columns=["scene", "hsi", "msi", "sensor"]).to_csv(index, index=False)
    logger.info(f"データセット保存: {out} ({len(dataset)}シーン)")
    return {"index": index, "srf": out / "srf", "art": out / "art_prior.csv"}


def load_dataset(data_dir) -> tuple[list[ScenePair], Optional[SpectrumTable]]:
    """save_dataset の出力を読み込む

    Returns:
        (シーンのリスト, ART 事前分布 (なければ None))
    """
    root = Path(data_dir)
    index = root / DATASET_INDEX
    if not index.is_file():
        raise IoError(f"データセット索引がありません: {index}")
    frame = pd.read_csv(index, dtype=str)
    missing = {"hsi", "msi", "sensor"} - set(frame.columns)
    if missing:
        raise ParseError(f"{index}: 列 {sorted(missing)} がありません")

    database = load_srf_database(root / "srf")
    dataset = []
    for row in frame.itertuples(index=False):
        hsi = read_hsi(root / row.hsi)
        curves = find_sensor(database, row.sensor)
        srf = discretize_srf(curves, hsi.grid)
        dataset.append(ScenePair(hsi=hsi, msi=read_msi(root / row.msi), srf=srf, curves=curves))
    art_path = root / "art_prior.csv"
    art = read_spectrum_csv(art_path) if art_path.is_file() else None
    return dataset, art
