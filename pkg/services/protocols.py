"""SSRNO 評価プロトコル

- 連続 (内挿): 1/factor に間引いたバンドで学習し、全バンドで評価
- ゼロショット (外挿): cutoff 未満のバンドだけで学習し、全バンドで評価
- アブレーション: ART 事前分布 × 精緻化 の4構成

どのプロトコルも、学習に使わなかった末尾シーンで評価する。
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from models.spectral import SpectrumTable
from services.errors import InvalidParameter
from services.metrics import MetricsReport
from services.neural_operator import OperatorConfig
from services.pipeline import evaluate_scenes, gmp_baseline, reconstruct_many, scene_inputs
from services.srf_registry import degrade, discretize_srf
from services.synthetic import ScenePair
from services.training import EpochLoss, TrainConfig, TrainingResult, split_scenes, train

logger = logging.getLogger(__name__)


@dataclass
class ProtocolResult:
    """プロトコルの評価結果"""
    name: str
    metrics: MetricsReport
    baseline: MetricsReport
    train_grid: np.ndarray
    eval_grid: np.ndarray
    curve: list[EpochLoss] = field(default_factory=list)
    per_scene: list[MetricsReport] = field(default_factory=list)
    training: Optional[TrainingResult] = None


def restrict_dataset(dataset: list[ScenePair], indices) -> list[ScenePair]:
    """バンド部分集合のデータセット (SRF は部分グリッドで再離散化し X を作り直す)"""
    idx = np.asarray(indices, dtype=np.int64)
    restricted = []
    for scene in dataset:
        hsi = scene.hsi.select_bands(idx)
        srf = discretize_srf(scene.curves, hsi.grid, drop_degenerate=True)
        restricted.append(ScenePair(hsi=hsi, msi=degrade(srf, hsi), srf=srf, curves=scene.curves))
    return restricted


def _train_and_evaluate(
    name: str,
    dataset: list[ScenePair],
    train_set: list[ScenePair],
    train_config: TrainConfig,
    operator_config: Optional[OperatorConfig],
    art: Optional[SpectrumTable],
    threads: Optional[int],
) -> ProtocolResult:
    training = train(train_config, train_set, operator_config, art)
    _, eval_scenes = split_scenes(dataset)
    outputs = reconstruct_many(
        scene_inputs(eval_scenes, art),
        training.params.astype(np.float64),
        use_art_prior=train_config.use_art_prior,
        use_refinement=train_config.use_refinement,
        precision="real64",
        threads=threads,
    )
    metrics, per_scene = evaluate_scenes([cube for cube, _ in outputs], [s.hsi for s in eval_scenes])
    baseline = gmp_baseline(eval_scenes, art, train_config.use_art_prior, threads)
    logger.info(
        f"{name}: PSNR={metrics.psnr:.2f} dB (GMP {baseline.psnr:.2f} dB), "
        f"SAM={metrics.sam:.4f} (GMP {baseline.sam:.4f})"
    )
    return ProtocolResult(
        name=name,
        metrics=metrics,
        baseline=baseline,
        train_grid=train_set[0].hsi.grid.copy(),
        eval_grid=dataset[0].hsi.grid.copy(),
        curve=list(training.curve),
        per_scene=per_scene,
        training=training,
    )


def protocol_continuous(
    dataset: list[ScenePair],
    factor: int = 2,
    train_config: Optional[TrainConfig] = None,
    operator_config: Optional[OperatorConfig] = None,
    art: Optional[SpectrumTable] = None,
    threads: Optional[int] = None,
) -> ProtocolResult:
    """factor おきのバンドで学習し全グリッドで評価 (スペクトル内挿)"""
    if factor < 1:
        raise InvalidParameter(f"factor は1以上: {factor}")
    train_config = train_config or TrainConfig.from_dict()
    indices = np.arange(0, dataset[0].hsi.c_bands, factor)
    if indices.size < 2:
        raise InvalidParameter(f"間引き後のバンド数が2未満です (factor={factor})")
    return _train_and_evaluate(
        "continuous", dataset, restrict_dataset(dataset, indices), train_config, operator_config, art, threads
    )


def protocol_zeroshot(
    dataset: list[ScenePair],
    cutoff_nm: float = 1000.0,
    train_config: Optional[TrainConfig] = None,
    operator_config: Optional[OperatorConfig] = None,
    art: Optional[SpectrumTable] = None,
    threads: Optional[int] = None,
) -> ProtocolResult:
    """cutoff 未満の波長だけで学習し全グリッドで評価 (スペクトル外挿)"""
    train_config = train_config or TrainConfig.from_dict()
    indices = np.flatnonzero(dataset[0].hsi.grid < cutoff_nm)
    if indices.size < 2:
        raise InvalidParameter(f"{cutoff_nm} nm 未満のバンドが2本未満です")
    return _train_and_evaluate(
        "zeroshot", dataset, restrict_dataset(dataset, indices), train_config, operator_config, art, threads
    )


ABLATION_CONFIGS = {
    "full": {"use_art_prior": True, "use_refinement": True},
    "no_art_prior": {"use_art_prior": False, "use_refinement": True},
    "no_refinement": {"use_art_prior": True, "use_refinement": False},
    "neither": {"use_art_prior": False, "use_refinement": False},
}


def protocol_ablation(
    dataset: list[ScenePair],
    train_config: Optional[TrainConfig] = None,
    operator_config: Optional[OperatorConfig] = None,
    art: Optional[SpectrumTable] = None,
    threads: Optional[int] = None,
) -> dict[str, ProtocolResult]:
    """ART 事前分布 × 精緻化 の4構成をそれぞれ学習・評価"""
    base = (train_config or TrainConfig.from_dict()).to_dict()
    results = {}
    for label, flags in ABLATION_CONFIGS.items():
        cfg = TrainConfig(**{**base, **flags})
        results[label] = _train_and_evaluate(label, dataset, dataset, cfg, operator_config, art, threads)
    return results
