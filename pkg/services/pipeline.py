"""SSRNO 3段パイプライン

Stage 1 (アップサンプリング): Ȳ = P_GMP(Z, S, X)
Stage 2 (再構成):           Ỹ = R_no(Ȳ, w) + Ȳ
Stage 3 (精緻化):           Ŷ = P_GMP(Ỹ, S, X)
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

import config
from models.spectral import HsiCube, MsiImage, PriorCube, SpectrumTable, SrfMatrix
from services.art_prior import build_prior_cube, reference_beam_irradiance
from services.errors import InvalidParameter, ShapeMismatch
from services.gmp import GuidanceProjector, ProjectionResult
from services.metrics import MetricsReport, evaluate
from services.neural_operator import CoordinateGrid, OperatorParams, operator_forward
from services.synthetic import ScenePair

logger = logging.getLogger(__name__)


def tolerance_for(precision: str) -> float:
    if precision not in config.PRECISIONS:
        raise InvalidParameter(f"未対応の精度: {precision}")
    return config.GMP_TOLERANCE_REAL32 if precision == "real32" else config.GMP_TOLERANCE


def art_prior(grid, art: Optional[SpectrumTable] = None) -> PriorCube:
    """シーン全体にブロードキャストする ART 事前分布 (N=1)"""
    grid = np.asarray(grid, dtype=np.float64)
    art = art or reference_beam_irradiance(grid)
    return build_prior_cube(art, grid, 1)


# ──────────────────────────────────────────
# 各ステージ
# ──────────────────────────────────────────

def _project(
    guidance: PriorCube,
    srf: SrfMatrix,
    msi: MsiImage,
    precision: str,
    projector: Optional[GuidanceProjector],
) -> ProjectionResult:
    projector = projector or GuidanceProjector(srf)
    return projector.project(guidance, msi, tolerance_for(precision))


def stage1_result(
    msi: MsiImage,
    srf: SrfMatrix,
    prior: Optional[PriorCube],
    use_art_prior: bool = True,
    precision: str = "real64",
    projector: Optional[GuidanceProjector] = None,
) -> ProjectionResult:
    if not use_art_prior or prior is None:
        prior = PriorCube.zeros(srf.grid)
    return _project(prior, srf, msi, precision, projector)


def stage1_upsample(
    msi: MsiImage,
    srf: SrfMatrix,
    prior: Optional[PriorCube],
    use_art_prior: bool = True,
    precision: str = "real64",
) -> HsiCube:
    """Ȳ = P_GMP(Z, S, X)。事前分布なしならゼロ行列 (最小ノルム解)"""
    return stage1_result(msi, srf, prior, use_art_prior, precision).y_star


def stage2_reconstruct(y_bar: HsiCube, grid: CoordinateGrid, params: Optional[OperatorParams]) -> HsiCube:
    """Ỹ = R_no(Ȳ, w) + Ȳ (params=None なら Ȳ をそのまま返す)"""
    if params is None:
        return y_bar
    return operator_forward(y_bar, grid, params)


def stage3_result(
    y_tilde: HsiCube,
    srf: SrfMatrix,
    msi: MsiImage,
    precision: str = "real64",
    projector: Optional[GuidanceProjector] = None,
) -> ProjectionResult:
    return _project(PriorCube.from_cube(y_tilde), srf, msi, precision, projector)


def stage3_refine(y_tilde: HsiCube, srf: SrfMatrix, msi: MsiImage, precision: str = "real64") -> HsiCube:
    """Ŷ = P_GMP(Ỹ, S, X) (SŶ = X を厳密に満たす)"""
    return stage3_result(y_tilde, srf, msi, precision).y_star


# ──────────────────────────────────────────
# シーン単位の推論
# ──────────────────────────────────────────

@dataclass
class SceneDiagnostics:
    """シーンごとの射影診断"""
    stage1_fallback: int
    stage1_residual: float
    stage3_fallback: Optional[int] = None
    stage3_residual: Optional[float] = None


def reconstruct_scene(
    msi: MsiImage,
    srf: SrfMatrix,
    prior: Optional[PriorCube],
    params: Optional[OperatorParams] = None,
    use_art_prior: bool = True,
    use_refinement: bool = True,
    precision: str = "real64",
) -> tuple[HsiCube, SceneDiagnostics]:
    """3段の推論 (params=None は GMP のみのベースライン)"""
    projector = GuidanceProjector(srf)
    first = stage1_result(msi, srf, prior, use_art_prior, precision, projector)
    diag = SceneDiagnostics(stage1_fallback=first.fallback_count, stage1_residual=first.feasibility_residual)

    y = first.y_star
    if params is not None:
        y = stage2_reconstruct(y, CoordinateGrid(srf.grid), params)
        if use_refinement:
            third = stage3_result(y, srf, msi, precision, projector)
            diag.stage3_fallback = third.fallback_count
            diag.stage3_residual = third.feasibility_residual
            y = third.y_star

    dtype = np.dtype(config.PRECISIONS[precision])
    return y.with_data(y.data.astype(dtype)), diag


@dataclass
class SceneInput:
    msi: MsiImage
    srf: SrfMatrix
    prior: Optional[PriorCube]


def reconstruct_many(
    inputs: list[SceneInput],
    params: Optional[OperatorParams] = None,
    use_art_prior: bool = True,
    use_refinement: bool = True,
    precision: str = "real64",
    threads: Optional[int] = None,
) -> list[tuple[HsiCube, SceneDiagnostics]]:
    """シーン並列の推論 (結果は入力順)"""
    threads = threads or config.DEFAULT_THREADS

    def run(item: SceneInput):
        return reconstruct_scene(item.msi, item.srf, item.prior, params, use_art_prior, use_refinement, precision)

    if threads <= 1 or len(inputs) <= 1:
        return [run(item) for item in inputs]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(run, inputs))


def scene_inputs(dataset: list[ScenePair], art: Optional[SpectrumTable] = None) -> list[SceneInput]:
    """データセットから推論入力を組み立てる (ART 事前分布はグリッドごとに1回)"""
    priors: dict[bytes, PriorCube] = {}
    inputs = []
    for scene in dataset:
        key = scene.srf.grid.tobytes()
        if key not in priors:
            priors[key] = art_prior(scene.srf.grid, art)
        inputs.append(SceneInput(msi=scene.msi, srf=scene.srf, prior=priors[key]))
    return inputs


# ──────────────────────────────────────────
# 評価
# ──────────────────────────────────────────

def evaluate_scenes(
    predictions: list[HsiCube],
    references: list[HsiCube],
) -> tuple[MetricsReport, list[MetricsReport]]:
    """シーンごとの指標とその平均"""
    if len(predictions) != len(references) or not predictions:
        raise ShapeMismatch(f"予測 {len(predictions)} 件と正解 {len(references)} 件が不一致")
    per_scene = [evaluate(p, r) for p, r in zip(predictions, references)]
    return MetricsReport.mean(per_scene), per_scene


def gmp_baseline(
    dataset: list[ScenePair],
    art: Optional[SpectrumTable] = None,
    use_art_prior: bool = True,
    threads: Optional[int] = None,
) -> MetricsReport:
    """Stage 1 のみの出力の指標"""
    outputs = reconstruct_many(scene_inputs(dataset, art), None, use_art_prior, threads=threads)
    report, _ = evaluate_scenes([cube for cube, _ in outputs], [scene.hsi for scene in dataset])
    logger.info(f"GMP ベースライン: PSNR={report.psnr:.2f} dB, SAM={report.sam:.4f}")
    return report
