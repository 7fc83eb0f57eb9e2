"""SSRNO レポート出力

バンドごとの誤差表 (CSV)、誤差マップと代表画素スペクトルの比較図 (plotly HTML)、
学習曲線を書き出す。
"""
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

import config
from models.spectral import HsiCube
from services.errors import IoError, ShapeMismatch

logger = logging.getLogger(__name__)

MAX_MAP_BANDS = 6


def band_error_table(pred: HsiCube, ref: HsiCube) -> pd.DataFrame:
    """バンドごとの MAE / RMSE / MRAE"""
    if pred.data.shape != ref.data.shape:
        raise ShapeMismatch(f"予測 {pred.data.shape} と正解 {ref.data.shape} の形状が不一致")
    diff = pred.data.astype(np.float64) - ref.data.astype(np.float64)
    rel = np.abs(diff) / np.maximum(ref.data.astype(np.float64), config.MRAE_FLOOR)
    return pd.DataFrame({
        "band": np.arange(ref.c_bands),
        "wavelength_nm": ref.grid,
        "mae": np.abs(diff).mean(axis=(1, 2)),
        "rmse": np.sqrt((diff ** 2).mean(axis=(1, 2))),
        "mrae": rel.mean(axis=(1, 2)),
    })


def _map_bands(c_bands: int) -> list[int]:
    count = min(MAX_MAP_BANDS, c_bands)
    return sorted(set(np.linspace(0, c_bands - 1, count).round().astype(int).tolist()))


def error_map_figure(pred: HsiCube, ref: HsiCube, bands: Optional[list[int]] = None) -> go.Figure:
    """選んだバンドの絶対誤差マップ"""
    bands = bands or _map_bands(ref.c_bands)
    err = np.abs(pred.data.astype(np.float64) - ref.data.astype(np.float64))
    vmax = float(err[bands].max()) or 1.0
    fig = make_subplots(
        rows=1,
        cols=len(bands),
        subplot_titles=[f"{ref.grid[b]:.0f} nm" for b in bands],
    )
    for i, b in enumerate(bands, start=1):
        fig.add_trace(
            go.Heatmap(z=err[b], zmin=0.0, zmax=vmax, colorscale="Viridis", showscale=(i == len(bands))),
            row=1,
            col=i,
        )
        fig.update_yaxes(autorange="reversed", row=1, col=i)
    fig.update_layout(height=320, margin=dict(l=20, r=20, t=40, b=20), title="絶対誤差マップ")
    return fig


def spectra_figure(pred: HsiCube, ref: HsiCube, pixels: Optional[list[tuple[int, int]]] = None) -> go.Figure:
    """代表画素の予測・正解スペクトル"""
    pixels = pixels or [(ref.height // 2, ref.width // 2), (0, 0), (ref.height - 1, ref.width - 1)]
    fig = go.Figure()
    for r, c in pixels:
        fig.add_trace(go.Scatter(
            x=ref.grid, y=ref.data[:, r, c], name=f"正解 ({r},{c})", mode="lines",
        ))
        fig.add_trace(go.Scatter(
            x=pred.grid, y=pred.data[:, r, c], name=f"予測 ({r},{c})", mode="lines", line=dict(dash="dot"),
        ))
    fig.update_layout(
        height=400, margin=dict(l=20, r=20, t=40, b=20),
        xaxis=dict(title="波長 (nm)"), yaxis=dict(title="反射強度"),
        legend=dict(orientation="h", y=-0.2), hovermode="x unified",
    )
    return fig


def loss_curve_figure(curve: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=curve["epoch"], y=curve["train_loss"], name="train", mode="lines+markers"))
    fig.add_trace(go.Scatter(x=curve["epoch"], y=curve["val_loss"], name="val", mode="lines+markers"))
    fig.update_layout(height=350, margin=dict(l=20, r=20, t=30, b=20), xaxis=dict(title="epoch"))
    return fig


def _write_html(fig: go.Figure, path: Path):
    try:
        fig.write_html(str(path), include_plotlyjs=True, full_html=True)
    except OSError as e:
        raise IoError(f"図の書き込み失敗: {path}: {e}") from e


def write_report(
    pred: HsiCube,
    ref: HsiCube,
    out_dir,
    curve: Optional[pd.DataFrame] = None,
) -> dict[str, Path]:
    """誤差表・誤差マップ・スペクトル比較 (・学習曲線) を書き出す

    Returns:
        種類 → 出力パス
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    table = band_error_table(pred, ref)
    written["band_errors"] = out / "band_errors.csv"
    table.to_csv(written["band_errors"], index=False, float_format="%.17g")

    written["error_maps"] = out / "error_maps.html"
    _write_html(error_map_figure(pred, ref), written["error_maps"])
    written["spectra"] = out / "spectra.html"
    _write_html(spectra_figure(pred, ref), written["spectra"])

    if curve is not None and not curve.empty:
        written["loss_curve"] = out / "loss_curve.html"
        _write_html(loss_curve_figure(curve), written["loss_curve"])

    logger.info(f"レポート出力: {out} ({len(written)}ファイル)")
    return written
