"""SSRNO 学習ループ

Stage 1 の出力を事前計算し、Stage 2 のニューラルオペレータだけを Adam で学習する。
Stage 3 は評価・推論時にのみ適用する。精緻化なしのアブレーションでは
劣化領域の L1 正則化付き損失で学習する。
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

import config
from models.spectral import SpectrumTable
from services.data_io import load_checkpoint, patch_origins, save_checkpoint
from services.errors import FormatError, GridMismatch, InvalidParameter, NonFiniteLoss
from services.losses import combined_loss, regularized_loss_arrays
from services.neural_operator import (
    CoordinateGrid,
    OperatorConfig,
    OperatorParams,
    init_params,
    operator_backward,
    operator_forward_batch,
    params_from_tensors,
)
from services.pipeline import art_prior, stage1_result
from services.synthetic import ScenePair

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """学習設定"""
    lambda_sam: float = 0.1
    ablation_alpha: float = 0.5
    use_art_prior: bool = True
    use_refinement: bool = True
    learning_rate: float = 1e-3
    epochs: int = 10
    batch: int = 4
    patch: int = 32
    seed: int = 0
    precision: str = "real32"
    recompute_activations: bool = True

    def __post_init__(self):
        if self.lambda_sam < 0:
            raise InvalidParameter(f"lambda_sam は非負: {self.lambda_sam}")
        if self.patch < 8:
            raise InvalidParameter(f"patch は8以上: {self.patch}")
        if self.epochs < 1 or self.batch < 1:
            raise InvalidParameter(f"epochs と batch は1以上: epochs={self.epochs}, batch={self.batch}")
        if not self.learning_rate > 0:
            raise InvalidParameter(f"learning_rate は正: {self.learning_rate}")
        if self.precision not in config.PRECISIONS:
            raise InvalidParameter(f"未対応の精度: {self.precision}")

    @classmethod
    def from_dict(cls, values: Optional[dict] = None) -> "TrainConfig":
        merged = {**config.DEFAULT_TRAIN_CONFIG, **(values or {})}
        return cls(**{k: merged[k] for k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


class AdamOptimizer:
    """パラメータをその場で更新する Adam"""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = config.ADAM_BETA1,
        beta2: float = config.ADAM_BETA2,
        eps: float = config.ADAM_EPS,
    ):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: OperatorParams, grads: OperatorParams):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for (name, p), (_, g) in zip(params.named_tensors(), grads.named_tensors()):
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(p.dtype, copy=False)


@dataclass
class EpochLoss:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingResult:
    params: OperatorParams
    config: TrainConfig
    curve: list[EpochLoss] = field(default_factory=list)
    train_grid: Optional[np.ndarray] = None

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.curve], columns=["epoch", "train_loss", "val_loss"])


@dataclass
class _Sample:
    y_bar: np.ndarray   # (C, p, p)
    target: np.ndarray
    srf: np.ndarray     # (M, C)


def split_scenes(dataset: list[ScenePair]) -> tuple[list[ScenePair], list[ScenePair]]:
    """末尾 ⌈n/4⌉ シーンを検証用に分ける (1シーンなら学習・検証とも同じ)"""
    if len(dataset) < 2:
        return list(dataset), list(dataset)
    n_val = math.ceil(len(dataset) / 4)
    return list(dataset[:-n_val]), list(dataset[-n_val:])


def _stage1_cube(scene: ScenePair, cfg: TrainConfig, art: Optional[SpectrumTable]) -> np.ndarray:
    prior = art_prior(scene.srf.grid, art) if cfg.use_art_prior else None
    result = stage1_result(scene.msi, scene.srf, prior, cfg.use_art_prior, cfg.precision)
    return result.y_star.data


def _patch_samples(scenes: list[ScenePair], cfg: TrainConfig, art, dtype) -> list[_Sample]:
    samples = []
    for i, scene in enumerate(scenes):
        y_bar = _stage1_cube(scene, cfg, art)
        size = min(cfg.patch, scene.hsi.height, scene.hsi.width)
        if size != cfg.patch:
            logger.info(f"シーン {i}: パッチ {cfg.patch} を画像サイズ {size} に縮小")
        for r, c in patch_origins(scene.hsi.height, scene.hsi.width, size, size, cfg.seed + i):
            window = (slice(None), slice(r, r + size), slice(c, c + size))
            samples.append(_Sample(
                y_bar=y_bar[window].astype(dtype),
                target=scene.hsi.data[window].astype(dtype),
                srf=scene.srf.data,
            ))
    return samples


def _objective(pred, target, srf, cfg: TrainConfig):
    if cfg.use_refinement:
        return combined_loss(pred, target, cfg.lambda_sam)
    return regularized_loss_arrays(pred, target, srf, cfg.lambda_sam, cfg.ablation_alpha)


def _common_grid(dataset: list[ScenePair]) -> np.ndarray:
    grid = dataset[0].srf.grid
    for scene in dataset[1:]:
        if scene.srf.grid.shape != grid.shape or not np.allclose(scene.srf.grid, grid, rtol=0, atol=1e-9):
            raise GridMismatch("学習データのシーン間で波長グリッドが一致しません")
    return grid


def train(
    cfg: TrainConfig,
    dataset: list[ScenePair],
    operator_config: Optional[OperatorConfig] = None,
    art: Optional[SpectrumTable] = None,
    progress_callback: Optional[Callable[[EpochLoss], None]] = None,
) -> TrainingResult:
    """Stage 1–2 を通した損失で Adam 学習

    Raises:
        NonFiniteLoss: 損失が有限でなくなった (epoch と batch を含む)
    """
    if not dataset:
        raise InvalidParameter("学習データセットが空です")
    grid = _common_grid(dataset)
    coords = CoordinateGrid(grid).normalized
    dtype = np.dtype(config.PRECISIONS[cfg.precision])

    operator_config = operator_config or OperatorConfig.from_dict({"seed": cfg.seed})
    params = init_params(operator_config).astype(dtype)
    optimizer = AdamOptimizer(cfg.learning_rate)

    train_scenes, val_scenes = split_scenes(dataset)
    samples = _patch_samples(train_scenes, cfg, art, dtype)
    val_samples = [
        _Sample(y_bar=_stage1_cube(s, cfg, art).astype(dtype), target=s.hsi.data.astype(dtype), srf=s.srf.data)
        for s in val_scenes
    ]
    logger.info(
        f"学習開始: 学習{len(train_scenes)}シーン ({len(samples)}パッチ), 検証{len(val_scenes)}シーン, "
        f"{grid.size}バンド, パラメータ数 {params.parameter_count()}"
    )

    rng = np.random.default_rng(cfg.seed)
    result = TrainingResult(params=params, config=cfg, train_grid=grid.copy())
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch)):
            chosen = [samples[i] for i in order[start: start + cfg.batch]]
            y_bar = np.stack([s.y_bar for s in chosen])
            target = np.stack([s.target for s in chosen])
            srf = [s.srf for s in chosen]

            pred, cache = operator_forward_batch(y_bar, coords, params, recompute=cfg.recompute_activations)
            value, grad = _objective(pred, target, srf, cfg)
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            grads, _ = operator_backward(cache, grad.astype(dtype, copy=False), params)
            optimizer.step(params, grads)
            batch_losses.append(value)

        val_losses = []
        for s in val_samples:
            pred, _ = operator_forward_batch(s.y_bar[None], coords, params, keep_cache=False)
            value, _ = _objective(pred, s.target[None], [s.srf], cfg)
            val_losses.append(value)
        entry = EpochLoss(epoch=epoch, train_loss=float(np.mean(batch_losses)), val_loss=float(np.mean(val_losses)))
        if not np.isfinite(entry.val_loss):
            raise NonFiniteLoss(epoch, -1, entry.val_loss)
        result.curve.append(entry)
        logger.info(f"epoch {epoch}/{cfg.epochs}: train={entry.train_loss:.6f} val={entry.val_loss:.6f}")
        if progress_callback:
            progress_callback(entry)
    return result


# ──────────────────────────────────────────
# チェックポイント
# ──────────────────────────────────────────

def save_trained(path, result: TrainingResult) -> Path:
    """学習済みパラメータと設定をチェックポイントに保存"""
    metadata = {
        "operator_config": result.params.config.to_dict(),
        "train_config": result.config.to_dict(),
        "train_grid_nm": [float(v) for v in result.train_grid] if result.train_grid is not None else [],
        "tool_version": config.TOOL_VERSION,
    }
    save_checkpoint(path, metadata, result.params.named_tensors(), result.config.precision)
    return Path(path)


def load_trained(path) -> tuple[OperatorParams, dict]:
    """チェックポイントからパラメータを復元 (計算は real64)

    Returns:
        (パラメータ, メタデータ)
    """
    metadata, tensors = load_checkpoint(path)
    try:
        operator_config = OperatorConfig(**metadata["operator_config"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"チェックポイントに演算子設定がありません: {path}") from e
    params = params_from_tensors(operator_config, dict(tensors)).astype(np.float64)
    return params, metadata
