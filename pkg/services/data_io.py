"""SSRNO データ入出力モジュール

HSI/MSI コンテナ、CSV (スペクトル・SRF)、チェックポイントの読み書きと
パッチ抽出を行う。

コンテナのバイト配置:
    magic (5 bytes) | ヘッダ長 uint32 LE | UTF-8 ヘッダ (key=value 行) | ペイロード
ペイロードはリトルエンディアン、バンド順次 (バンド → 行 → 列)。
"""
import json
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from models.spectral import HsiCube, MsiImage, SpectrumTable, SrfBand, SrfCurveSet
from services.errors import (
    FormatError,
    IoError,
    NegativeSensitivity,
    ParseError,
    PatchTooLarge,
    ShapeMismatch,
    TruncatedPayload,
)

logger = logging.getLogger(__name__)

HSI_MAGIC = b"SSRH1"
MSI_MAGIC = b"SSRM1"
CHECKPOINT_MAGIC = b"SSRNO1"

DTYPES = {"real32": "<f4", "real64": "<f8"}
DTYPE_NAMES = {np.dtype("float32"): "real32", np.dtype("float64"): "real64"}


def _dtype_name(array: np.ndarray) -> str:
    name = DTYPE_NAMES.get(array.dtype)
    if name is None:
        raise FormatError(f"対応していない dtype: {array.dtype}")
    return name


# ──────────────────────────────────────────
# 共通コンテナ
# ──────────────────────────────────────────

def _write_container(path, magic: bytes, header: dict, payload: np.ndarray):
    text = "".join(f"{key}={value}\n" for key, value in header.items()).encode("utf-8")
    dtype = DTYPES[header["dtype"]]
    try:
        with open(path, "wb") as f:
            f.write(magic)
            f.write(struct.pack("<I", len(text)))
            f.write(text)
            f.write(np.ascontiguousarray(payload, dtype=dtype).tobytes(order="C"))
    except OSError as e:
        raise IoError(f"書き込み失敗: {path}: {e}") from e


def _read_container(path, magic: bytes) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"読み込み失敗: {path}: {e}") from e

    if raw[: len(magic)] != magic:
        raise FormatError(f"マジックが不正です: {path}")
    offset = len(magic)
    if len(raw) < offset + 4:
        raise FormatError(f"ヘッダ長が欠落しています: {path}")
    (length,) = struct.unpack("<I", raw[offset: offset + 4])
    offset += 4
    if len(raw) < offset + length:
        raise FormatError(f"ヘッダが途中で切れています: {path}")
    try:
        text = raw[offset: offset + length].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"ヘッダが UTF-8 ではありません: {path}") from e

    header = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"ヘッダ行が key=value ではありません: {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header, raw[offset + length:]


def _header_int(header: dict, key: str) -> int:
    try:
        value = int(header[key])
    except (KeyError, ValueError) as e:
        raise FormatError(f"ヘッダ {key} が不正です") from e
    if value < 1:
        raise FormatError(f"ヘッダ {key}={value} は1以上が必要です")
    return value


def _header_dtype(header: dict) -> str:
    dtype = header.get("dtype", "")
    if dtype not in DTYPES:
        raise FormatError(f"ヘッダ dtype={dtype!r} は real32/real64 のいずれかが必要です")
    return dtype


def _payload(raw: bytes, dtype: str, shape: tuple) -> np.ndarray:
    expected = int(np.prod(shape)) * np.dtype(DTYPES[dtype]).itemsize
    if len(raw) < expected:
        raise TruncatedPayload(f"ペイロード不足: {len(raw)} < {expected} bytes")
    if len(raw) > expected:
        raise FormatError(f"ペイロード過剰: {len(raw)} > {expected} bytes")
    return np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).astype(
        np.dtype(DTYPES[dtype]).newbyteorder("=")
    )


# ──────────────────────────────────────────
# HSI コンテナ
# ──────────────────────────────────────────

def write_hsi(cube: HsiCube, path):
    """HSI をコンテナ形式で保存"""
    header = {
        "height": cube.height,
        "width": cube.width,
        "c_bands": cube.c_bands,
        "dtype": _dtype_name(cube.data),
        "layout": "bsq",
        "wavelengths_nm": ",".join(repr(float(w)) for w in cube.grid),
    }
    _write_container(path, HSI_MAGIC, header, cube.data)
    logger.debug(f"HSI 保存: {path} ({cube.c_bands}×{cube.height}×{cube.width})")


def read_hsi(path) -> HsiCube:
    """HSI コンテナを読み込み (ヘッダを全て検証してからペイロードに触れる)"""
    header, raw = _read_container(path, HSI_MAGIC)
    height = _header_int(header, "height")
    width = _header_int(header, "width")
    c_bands = _header_int(header, "c_bands")
    dtype = _header_dtype(header)
    if header.get("layout", "bsq") != "bsq":
        raise FormatError(f"未対応のレイアウト: {header.get('layout')}")
    try:
        grid = np.array([float(v) for v in header["wavelengths_nm"].split(",")])
    except (KeyError, ValueError) as e:
        raise FormatError("ヘッダ wavelengths_nm が不正です") from e
    if grid.size != c_bands:
        raise FormatError(f"波長数 {grid.size} != c_bands {c_bands}")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise FormatError("波長が狭義単調増加ではありません")

    data = _payload(raw, dtype, (c_bands, height, width))
    if not np.all(np.isfinite(data)):
        raise FormatError("ペイロードに有限でない値があります")
    return HsiCube(grid=grid, data=data)


# ──────────────────────────────────────────
# MSI コンテナ
# ──────────────────────────────────────────

def write_msi(image: MsiImage, path):
    """MSI をコンテナ形式で保存"""
    header = {
        "height": image.height,
        "width": image.width,
        "m_bands": image.m_bands,
        "dtype": _dtype_name(image.data),
        "layout": "bsq",
        "srf_name": image.srf_name,
    }
    _write_container(path, MSI_MAGIC, header, image.data)
    logger.debug(f"MSI 保存: {path} ({image.m_bands}×{image.height}×{image.width})")


def read_msi(path) -> MsiImage:
    """MSI コンテナを読み込み"""
    header, raw = _read_container(path, MSI_MAGIC)
    height = _header_int(header, "height")
    width = _header_int(header, "width")
    m_bands = _header_int(header, "m_bands")
    dtype = _header_dtype(header)
    data = _payload(raw, dtype, (m_bands, height, width))
    return MsiImage(data=data, srf_name=header.get("srf_name", ""))


# ──────────────────────────────────────────
# CSV (スペクトル・SRF)
# ──────────────────────────────────────────

def _read_csv(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, comment="#", skipinitialspace=True, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"CSV が空です: {path}") from e
    except pd.errors.ParserError as e:
        raise ParseError(f"CSV の書式不正: {path}: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise IoError(f"CSV 読み込み失敗: {path}: {e}") from e
    if frame.empty:
        raise ParseError(f"CSV にデータ行がありません: {path}")
    if "wavelength_nm" not in frame.columns:
        raise ParseError(f"ヘッダに wavelength_nm がありません: {path}")
    try:
        frame = frame.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise ParseError(f"数値でない値があります: {path}: {e}") from e
    wl = frame["wavelength_nm"].to_numpy(dtype=np.float64)
    if np.any(~np.isfinite(wl)):
        raise ParseError(f"波長が欠落しています: {path}")
    if wl.size > 1 and not np.all(np.diff(wl) > 0):
        raise ParseError(f"波長が昇順ではありません: {path}")
    return frame


def read_spectrum_csv(path) -> SpectrumTable:
    """`wavelength_nm,value` 形式のスペクトル CSV を読み込み"""
    frame = _read_csv(path)
    if "value" not in frame.columns:
        raise ParseError(f"ヘッダに value がありません: {path}")
    values = frame["value"].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ParseError(f"value に欠損があります: {path}")
    return SpectrumTable(
        wavelengths=frame["wavelength_nm"].to_numpy(dtype=np.float64),
        values=values,
    )


def write_spectrum_csv(table: SpectrumTable, path, header_comment: str = ""):
    """スペクトル表を CSV で保存"""
    frame = pd.DataFrame({"wavelength_nm": table.wavelengths, "value": table.values})
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            frame.to_csv(f, index=False, float_format="%.17g")
    except OSError as e:
        raise IoError(f"CSV 書き込み失敗: {path}: {e}") from e


def read_srf_csv(path, name: Optional[str] = None) -> SrfCurveSet:
    """`wavelength_nm,band_1,...,band_M` 形式の SRF CSV を読み込み

    空欄はそのバンドのサンプルなしとして扱う (バンドごとに異なる標本化を許す)。
    """
    frame = _read_csv(path)
    band_columns = [c for c in frame.columns if c != "wavelength_nm"]
    if not band_columns:
        raise ParseError(f"バンド列がありません: {path}")

    wl = frame["wavelength_nm"].to_numpy(dtype=np.float64)
    bands = []
    for column in band_columns:
        values = frame[column].to_numpy(dtype=np.float64)
        mask = np.isfinite(values)
        if np.any(values[mask] < 0):
            raise NegativeSensitivity(f"{path}: {column} に負の感度があります")
        if mask.sum() < 2:
            raise ParseError(f"{path}: {column} のサンプルが2点未満です")
        bands.append(SrfBand(label=str(column), wavelengths=wl[mask], sensitivities=values[mask]))

    return SrfCurveSet(name=name or Path(path).stem, bands=bands)


def write_srf_csv(curves: SrfCurveSet, path):
    """SRF カーブ集合を CSV で保存 (全バンドの波長の和集合を行とする)"""
    wl = np.unique(np.concatenate([b.wavelengths for b in curves.bands]))
    frame = pd.DataFrame({"wavelength_nm": wl})
    for band in curves.bands:
        column = pd.Series(band.sensitivities, index=band.wavelengths)
        frame[band.label] = column.reindex(wl).to_numpy()
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# sensor={curves.name}\n")
            frame.to_csv(f, index=False, float_format="%.17g")
    except OSError as e:
        raise IoError(f"CSV 書き込み失敗: {path}: {e}") from e


def parse_grid_spec(spec: str) -> np.ndarray:
    """`start:stop:count` (nm) を波長グリッドに変換"""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ParseError(f"グリッド指定は start:stop:count 形式です: {spec!r}")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as e:
        raise ParseError(f"グリッド指定が数値ではありません: {spec!r}") from e
    if count < 1 or (count > 1 and not stop > start):
        raise ParseError(f"グリッド指定が不正です: {spec!r}")
    return np.linspace(start, stop, count)


# ──────────────────────────────────────────
# チェックポイント
# ──────────────────────────────────────────

def save_checkpoint(path, metadata: dict, tensors: list[tuple[str, np.ndarray]], precision: str = "real64"):
    """チェックポイント保存

    metadata (設定値) とテンソルマニフェスト (名前・形状・dtype) を JSON で書き、
    続けてマニフェスト順にフラットなリトルエンディアン配列を書く。
    """
    dtype = DTYPES[precision]
    manifest = [
        {"name": name, "shape": list(array.shape), "dtype": precision}
        for name, array in tensors
    ]
    block = json.dumps(
        {"metadata": metadata, "manifest": manifest},
        ensure_ascii=False,
        sort_keys=True,
    ).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(block)))
            f.write(block)
            for _, array in tensors:
                f.write(np.ascontiguousarray(array, dtype=dtype).tobytes(order="C"))
    except OSError as e:
        raise IoError(f"チェックポイント書き込み失敗: {path}: {e}") from e
    logger.info(f"チェックポイント保存: {path} ({len(tensors)} テンソル)")


def load_checkpoint(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    """チェックポイント読み込み

    Returns:
        (metadata, [(name, array), ...])
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"チェックポイント読み込み失敗: {path}: {e}") from e

    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"チェックポイントのマジックが不正です: {path}")
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 4:
        raise FormatError(f"メタデータ長が欠落しています: {path}")
    (length,) = struct.unpack("<I", raw[offset: offset + 4])
    offset += 4
    try:
        block = json.loads(raw[offset: offset + length].decode("utf-8"))
        manifest = block["manifest"]
        metadata = block["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"メタデータが不正です: {path}") from e
    offset += length

    tensors = []
    for entry in manifest:
        dtype = entry.get("dtype")
        if dtype not in DTYPES:
            raise FormatError(f"テンソル {entry.get('name')} の dtype が不正です")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape)) * np.dtype(DTYPES[dtype]).itemsize
        if len(raw) < offset + nbytes:
            raise TruncatedPayload(f"テンソル {entry['name']} のデータが不足しています")
        array = np.frombuffer(raw[offset: offset + nbytes], dtype=DTYPES[dtype]).reshape(shape)
        tensors.append((entry["name"], array.astype(np.dtype(DTYPES[dtype]).newbyteorder("="))))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"チェックポイント末尾に余分なデータがあります: {path}")
    return metadata, tensors


# ──────────────────────────────────────────
# パッチ抽出
# ──────────────────────────────────────────

def _axis_origins(size: int, patch: int, stride: int, rng: np.random.Generator) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    # 重なり幅の半分までジッター (両端は固定して被覆を保証)
    jitter = max(0, (patch - stride) // 2)
    if jitter > 0 and len(starts) > 2:
        for i in range(1, len(starts) - 1):
            shifted = starts[i] + int(rng.integers(-jitter, jitter + 1))
            starts[i] = min(max(shifted, 0), size - patch)
    return starts


def patch_origins(height: int, width: int, patch: int, stride: int, seed: int = 0) -> list[tuple[int, int]]:
    """グリッド + シード付きジッターのパッチ左上座標"""
    if patch > min(height, width) or patch < 1:
        raise PatchTooLarge(f"パッチ {patch} が画像 {height}×{width} に収まりません")
    if stride < 1:
        raise ShapeMismatch(f"ストライドは1以上が必要です: {stride}")
    rng = np.random.default_rng(seed)
    rows = _axis_origins(height, patch, stride, rng)
    cols = _axis_origins(width, patch, stride, rng)
    return [(r, c) for r in rows for c in cols]


def extract_patches(cube: HsiCube, patch: int, stride: int, seed: int = 0) -> list[HsiCube]:
    """シーンを覆うパッチ集合 (全バンド保持)"""
    origins = patch_origins(cube.height, cube.width, patch, stride, seed)
    return [
        HsiCube(grid=cube.grid.copy(), data=cube.data[:, r: r + patch, c: c + patch].copy())
        for r, c in origins
    ]
