"""SSRNO 評価指標 (MRAE / PSNR / SAM / SSIM)"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from skimage.metrics import structural_similarity

import config
from models.spectral import HsiCube
from services.errors import ShapeMismatch

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5     # skimage の既定 (σ=1.5 で 11×11 窓)


@dataclass
class MetricsReport:
    mrae: float
    psnr: float
    sam: float
    ssim: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_lines(self, prefix: str = "") -> list[str]:
        """key=value 行 (repr で往復可能な桁数)"""
        return [f"{prefix}{k}={v!r}" for k, v in self.to_dict().items()]

    @classmethod
    def mean(cls, reports: list["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ShapeMismatch("平均を取るレポートがありません")
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in cls.__dataclass_fields__})


def mrae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - target) / np.maximum(target, config.MRAE_FLOOR)))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return config.PSNR_CAP
    return float(min(config.PSNR_CAP, 10.0 * np.log10(config.PSNR_PEAK ** 2 / mse)))


def sam(pred: np.ndarray, target: np.ndarray) -> float:
    """画素ごとのスペクトル角の平均 (ラジアン)。ノルムゼロの画素は除外"""
    p = pred.reshape(pred.shape[0], -1).T
    t = target.reshape(target.shape[0], -1).T
    p_norm = np.linalg.norm(p, axis=1)
    t_norm = np.linalg.norm(t, axis=1)
    valid = (p_norm > 0) & (t_norm > 0)
    if not np.any(valid):
        return 0.0
    u = p[valid] / p_norm[valid, None]
    v = t[valid] / t_norm[valid, None]
    # 半角公式 (同一スペクトルで厳密に0)
    angles = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    return float(np.mean(angles))


def _ssim_sigma(height: int, width: int) -> float:
    """窓が画像に収まる σ (11 画素以上なら 1.5)"""
    side = min(height, width)
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if 2 * radius + 1 <= side:
        return SSIM_SIGMA
    fit = (side - 1) // 2
    logger.warning(f"画像 {height}×{width} が SSIM 窓より小さいため σ を縮小します")
    return fit / SSIM_TRUNCATE


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """バンドごとの SSIM (ガウス窓) の平均"""
    sigma = _ssim_sigma(pred.shape[1], pred.shape[2])
    values = [
        structural_similarity(
            pred[c].astype(np.float64),
            target[c].astype(np.float64),
            gaussian_weights=True,
            sigma=sigma,
            use_sample_covariance=False,
            data_range=config.PSNR_PEAK,
        )
        for c in range(pred.shape[0])
    ]
    return float(np.clip(np.mean(values), -1.0, 1.0))


def evaluate(y_hat: HsiCube, y: HsiCube) -> MetricsReport:
    """予測と正解 (正規化済み [0,1]) の指標"""
    if y_hat.data.shape != y.data.shape:
        raise ShapeMismatch(f"予測 {y_hat.data.shape} と正解 {y.data.shape} の形状が不一致")
    pred = y_hat.data.astype(np.float64)
    target = y.data.astype(np.float64)
    return MetricsReport(
        mrae=mrae(pred, target),
        psnr=psnr(pred, target),
        sam=sam(pred, target),
        ssim=ssim(pred, target),
    )
