"""SSRNO 学習損失

L = L1 + λ·SAM と、精緻化なしアブレーション用の劣化領域 L1 正則化付き損失。
各関数は (損失値, 予測に対する勾配) を返す。配列はバンド軸が -3 の
(C, H, W) または (B, C, H, W)。
"""
import logging
from typing import Optional

import numpy as np

import config
from models.spectral import HsiCube, SrfMatrix
from services.errors import ShapeMismatch

logger = logging.getLogger(__name__)


def _check(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"予測 {pred.shape} と正解 {target.shape} の形状が不一致")
    if pred.ndim not in (3, 4):
        raise ShapeMismatch(f"(C,H,W) か (B,C,H,W) が必要です: {pred.shape}")


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """全要素の平均絶対誤差"""
    diff = pred - target
    value = float(np.mean(np.abs(diff)))
    return value, np.sign(diff) / diff.size


def sam_loss(
    pred: np.ndarray,
    target: np.ndarray,
    delta: Optional[float] = None,
) -> tuple[float, np.ndarray]:
    """画素ごとのスペクトル角 arccos(clamp(cos, −1+δ, 1−δ)) の平均

    どちらかのノルムがゼロの画素は 0 として数え、勾配も流さない。
    クランプに掛かった画素の勾配は 0。
    """
    delta = config.SAM_CLAMP_DELTA if delta is None else delta
    p = np.moveaxis(pred, -3, -1)
    t = np.moveaxis(target, -3, -1)
    n_pix = p.size // p.shape[-1]

    p_norm = np.linalg.norm(p, axis=-1)
    t_norm = np.linalg.norm(t, axis=-1)
    valid = (p_norm > 0) & (t_norm > 0)
    safe_p = np.where(valid, p_norm, 1.0)
    safe_t = np.where(valid, t_norm, 1.0)

    cos = np.where(valid, np.sum(p * t, axis=-1) / (safe_p * safe_t), 1.0)
    clamped = np.clip(cos, -1.0 + delta, 1.0 - delta)
    angle = np.where(valid, np.arccos(clamped), 0.0)
    value = float(angle.sum() / n_pix)

    inside = valid & (cos > -1.0 + delta) & (cos < 1.0 - delta)
    dcos = np.where(inside, -1.0 / np.sqrt(1.0 - np.where(inside, cos, 0.0) ** 2), 0.0) / n_pix
    grad = (
        t / (safe_p * safe_t)[..., None]
        - (cos / safe_p ** 2)[..., None] * p
    ) * dcos[..., None]
    return value, np.moveaxis(grad, -1, -3)


def combined_loss(pred: np.ndarray, target: np.ndarray, lambda_sam: float) -> tuple[float, np.ndarray]:
    _check(pred, target)
    value, grad = l1_loss(pred, target)
    if lambda_sam:
        sam_value, sam_grad = sam_loss(pred, target)
        value += lambda_sam * sam_value
        grad = grad + lambda_sam * sam_grad
    return value, grad


def degraded_l1(pred: np.ndarray, target: np.ndarray, srf) -> tuple[float, np.ndarray]:
    """L1(S·pred, S·target)。平均は全バッチの劣化画像の全要素で取る

    Args:
        srf: (M, C) 行列、またはバッチ項目ごとの行列のリスト (M はセンサーごとに異なってよい)
    """
    _check(pred, target)
    batched = pred.ndim == 4
    p = pred if batched else pred[None]
    t = target if batched else target[None]
    if isinstance(srf, np.ndarray) and srf.ndim == 2:
        matrices = [srf] * p.shape[0]
    else:
        matrices = list(srf)
    if len(matrices) != p.shape[0]:
        raise ShapeMismatch(f"SRF {len(matrices)} 個とバッチ {p.shape[0]} 件が不一致")

    diffs = []
    for s, pb, tb in zip(matrices, p, t):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[1] != pb.shape[0]:
            raise ShapeMismatch(f"SRF 列数 {s.shape[1]} とバンド数 {pb.shape[0]} が不一致")
        diffs.append(np.tensordot(s, pb - tb, axes=(1, 0)))
    total = sum(d.size for d in diffs)
    value = float(sum(np.abs(d).sum() for d in diffs) / total)
    grad = np.stack([
        np.tensordot(np.asarray(s, dtype=np.float64).T, np.sign(d) / total, axes=(1, 0))
        for s, d in zip(matrices, diffs)
    ])
    return value, grad if batched else grad[0]


def regularized_loss_arrays(
    pred: np.ndarray,
    target: np.ndarray,
    srf: np.ndarray,
    lambda_sam: float,
    alpha: float,
) -> tuple[float, np.ndarray]:
    value, grad = combined_loss(pred, target, lambda_sam)
    if alpha:
        reg_value, reg_grad = degraded_l1(pred, target, srf)
        value += alpha * reg_value
        grad = grad + alpha * reg_grad
    return value, grad


# ──────────────────────────────────────────
# HsiCube インターフェース
# ──────────────────────────────────────────

def loss(y_hat: HsiCube, y: HsiCube, lambda_sam: Optional[float] = None) -> tuple[float, np.ndarray]:
    """L1 + λ·SAM とその ŷ に対する勾配"""
    lam = config.DEFAULT_TRAIN_CONFIG["lambda_sam"] if lambda_sam is None else lambda_sam
    return combined_loss(y_hat.data.astype(np.float64), y.data.astype(np.float64), lam)


def regularized_loss(
    y_tilde: HsiCube,
    y: HsiCube,
    srf: SrfMatrix,
    alpha: Optional[float] = None,
    lambda_sam: Optional[float] = None,
) -> tuple[float, np.ndarray]:
    """L + α·L1(SỸ, SY)"""
    alpha = config.DEFAULT_TRAIN_CONFIG["ablation_alpha"] if alpha is None else alpha
    lam = config.DEFAULT_TRAIN_CONFIG["lambda_sam"] if lambda_sam is None else lambda_sam
    return regularized_loss_arrays(
        y_tilde.data.astype(np.float64), y.data.astype(np.float64), srf.data, lam, alpha
    )
