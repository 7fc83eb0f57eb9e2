"""SSRNO コマンドラインツール

サブコマンド: prior / gmp / synth / train / infer / eval / report
終了コード: 0 成功、2 引数エラー、それ以外は例外クラスごとのコード (services/errors.py)
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from sqlalchemy.exc import SQLAlchemyError

# パス設定
sys.path.insert(0, str(Path(__file__).resolve().parent))

import config
from db import database
from models.spectral import HsiCube, PriorCube
from services.art_prior import (
    FACTOR_KINDS,
    absorption_band_transmittance,
    aerosol_transmittance,
    build_prior_cube,
    compose_beam_irradiance,
    extraterrestrial_blackbody,
    load_factor_table,
    rayleigh_transmittance,
    reference_beam_irradiance,
)
from services.data_io import (
    parse_grid_spec,
    read_hsi,
    read_msi,
    read_spectrum_csv,
    write_hsi,
    write_spectrum_csv,
)
from services.errors import InvalidParameter, ParseError, SsrnoError
from services.gmp import project
from services.manifest import RunManifest, manifest_path, record_run
from services.metrics import MetricsReport
from services.neural_operator import OperatorConfig
from services.pipeline import (
    SceneInput,
    art_prior,
    evaluate_scenes,
    reconstruct_many,
    scene_inputs,
    tolerance_for,
)
from services.protocols import protocol_ablation, protocol_continuous, protocol_zeroshot
from services.reporting import write_report
from services.srf_registry import builtin_srf_database, discretize_srf, find_sensor, load_srf_database
from services.synthetic import load_dataset, save_dataset, synth_dataset, synth_grid
from services.training import TrainConfig, load_trained, save_trained, train

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else getattr(logging, config.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format=config.LOG_FORMAT, force=True)


# ──────────────────────────────────────────
# 共通処理
# ──────────────────────────────────────────

def _dtype(precision: str) -> np.dtype:
    return np.dtype(config.PRECISIONS[precision])


def _snapshot(args: argparse.Namespace) -> dict:
    skip = {"func", "command", "seed", "threads", "precision", "verbose", "db"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _manifest(args: argparse.Namespace, **kwargs) -> RunManifest:
    return RunManifest(
        command=args.command,
        seed=args.seed,
        threads=args.threads,
        precision=args.precision,
        config=_snapshot(args),
        **kwargs,
    )


def _finish(manifest: RunManifest, output, metrics=None, curve=None) -> Path:
    """マニフェストを出力の横に書き、実行記録 DB に登録する"""
    path = manifest.write(manifest_path(output))
    try:
        record_run(manifest, path, metrics, curve)
    except SQLAlchemyError as e:
        logger.warning(f"実行記録 DB への登録をスキップ: {e}")
    return path


def _load_sensor(srf_path: str, sensor: Optional[str]):
    database_ = load_srf_database(srf_path)
    if sensor:
        return find_sensor(database_, sensor)
    if len(database_) != 1:
        raise ParseError(f"SRF データベースに {len(database_)} センサーあります。--sensor で指定してください")
    return database_[0]


def _guidance(args: argparse.Namespace, grid: np.ndarray) -> Optional[PriorCube]:
    if getattr(args, "zero_prior", False):
        return PriorCube.zeros(grid)
    if getattr(args, "prior", None):
        return build_prior_cube(read_spectrum_csv(args.prior), grid, 1)
    return art_prior(grid)


def _write_metrics(path, report: MetricsReport, per_scene: Optional[list[MetricsReport]] = None) -> Path:
    lines = report.to_lines()
    for i, scene_report in enumerate(per_scene or []):
        lines += scene_report.to_lines(prefix=f"scene_{i:03d}.")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"指標出力: {path}")
    return Path(path)


# ──────────────────────────────────────────
# サブコマンド
# ──────────────────────────────────────────

def cmd_prior(args: argparse.Namespace) -> int:
    """地表直達日射スペクトルを合成して CSV に書く"""
    grid = parse_grid_spec(args.grid)
    e_on = read_spectrum_csv(args.e_on) if args.e_on else extraterrestrial_blackbody(grid)

    factors = []
    for spec in [s for entry in args.factor or [] for s in entry.split(",") if s]:
        kind, sep, path = spec.partition("=")
        if not sep:
            kind, path = Path(spec).stem, spec
        if kind not in FACTOR_KINDS:
            raise InvalidParameter(f"未知の透過率因子: {kind} (候補: {', '.join(FACTOR_KINDS)})")
        factors.append(load_factor_table(kind, path))
    if args.rayleigh is not None:
        factors.append(rayleigh_transmittance(grid, args.rayleigh))
    if args.aerosol is not None:
        factors.append(aerosol_transmittance(grid, args.aerosol))
    for kind in ("ozone", "mixed_gas", "water_vapor"):
        airmass = getattr(args, kind)
        if airmass is not None:
            factors.append(absorption_band_transmittance(kind, grid, airmass))

    e_bn = compose_beam_irradiance(e_on, factors, grid)
    write_spectrum_csv(e_bn, args.out)
    logger.info(f"直達日射出力: {args.out} ({grid.size}点, 因子{len(factors)}個)")

    manifest = _manifest(args, inputs={"e_on": args.e_on or "blackbody"}, outputs={"spectrum": args.out})
    manifest.extra["factor_count"] = len(factors)
    _finish(manifest, args.out)
    return 0


def cmd_gmp(args: argparse.Namespace) -> int:
    """MSI を GMP で HSI に射影"""
    msi = read_msi(args.msi)
    grid = parse_grid_spec(args.grid)
    srf = discretize_srf(_load_sensor(args.srf, args.sensor), grid, args.bandwidth)
    result = project(_guidance(args, grid), srf, msi, tolerance_for(args.precision))
    cube = result.y_star.with_data(result.y_star.data.astype(_dtype(args.precision)))
    write_hsi(cube, args.out)
    logger.info(
        f"GMP 出力: {args.out} (フォールバック {result.fallback_count}/{msi.n_pixels} 画素, "
        f"残差 {result.feasibility_residual:.3e})"
    )

    manifest = _manifest(
        args,
        inputs={"msi": args.msi, "srf": args.srf, "prior": args.prior or ("zero" if args.zero_prior else "art")},
        outputs={"hsi": args.out},
    )
    manifest.extra.update({
        "fallback_count": result.fallback_count,
        "feasibility_residual": result.feasibility_residual,
        "n_pixels": msi.n_pixels,
        "sensor": srf.name,
    })
    _finish(manifest, args.out)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """合成データセットを生成"""
    grid = synth_grid(args.bands)
    srf_db = load_srf_database(args.srf) if args.srf else builtin_srf_database(args.seed, args.sensors)
    art = read_spectrum_csv(args.art) if args.art else reference_beam_irradiance(grid, args.airmass)
    dataset = synth_dataset(args.seed, args.scenes, args.size, args.bands, srf_db, art, grid)
    paths = save_dataset(dataset, args.out, srf_db, art)

    manifest = _manifest(
        args,
        inputs={"srf": args.srf or "builtin", "art": args.art or "reference"},
        outputs={k: str(v) for k, v in paths.items()},
    )
    manifest.extra["sensors"] = [scene.name for scene in dataset]
    _finish(manifest, paths["index"])
    return 0


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig.from_dict({
        "lambda_sam": args.lambda_sam,
        "ablation_alpha": args.alpha,
        "use_art_prior": not args.no_art_prior,
        "use_refinement": not args.no_refinement,
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "batch": args.batch,
        "patch": args.patch,
        "seed": args.seed,
        "precision": args.precision,
        "recompute_activations": not args.keep_activations,
    })


def _operator_config(args: argparse.Namespace) -> OperatorConfig:
    return OperatorConfig.from_dict({
        "d_modes": args.d_modes,
        "hidden": args.hidden,
        "t_contract": args.t_contract,
        "t_transform": args.t_transform,
        "seed": args.seed,
    })


def cmd_train(args: argparse.Namespace) -> int:
    """オペレータを学習 (--protocol で連続・ゼロショット・アブレーション評価)"""
    dataset, art = load_dataset(args.data)
    train_config = _train_config(args)
    operator_config = _operator_config(args)
    manifest = _manifest(args, inputs={"data": args.data}, outputs={"checkpoint": args.out})
    metrics_rows = []

    if args.protocol == "standard":
        result = train(train_config, dataset, operator_config, art)
    elif args.protocol == "ablation":
        results = protocol_ablation(dataset, train_config, operator_config, art, args.threads)
        lines = []
        for label, outcome in results.items():
            lines += outcome.metrics.to_lines(prefix=f"{label}.")
            manifest.add_metrics(outcome.metrics, label)
            metrics_rows.append((label, -1, outcome.metrics))
        metrics_path = Path(f"{args.out}.metrics.txt")
        metrics_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest.outputs["metrics"] = str(metrics_path)
        result = results["full"].training
    else:
        if args.protocol == "continuous":
            outcome = protocol_continuous(dataset, args.factor, train_config, operator_config, art, args.threads)
        else:
            outcome = protocol_zeroshot(dataset, args.cutoff, train_config, operator_config, art, args.threads)
        metrics_path = _write_metrics(f"{args.out}.metrics.txt", outcome.metrics, outcome.per_scene)
        manifest.add_metrics(outcome.metrics, args.protocol)
        manifest.add_metrics(outcome.baseline, "gmp_baseline")
        manifest.outputs["metrics"] = str(metrics_path)
        manifest.extra["train_bands"] = len(outcome.train_grid)
        manifest.extra["eval_bands"] = len(outcome.eval_grid)
        metrics_rows += [(args.protocol, -1, outcome.metrics), ("gmp_baseline", -1, outcome.baseline)]
        result = outcome.training

    save_trained(args.out, result)
    curve_path = Path(f"{args.out}.loss.csv")
    result.curve_frame().to_csv(curve_path, index=False, float_format="%.17g")
    manifest.outputs["loss_curve"] = str(curve_path)
    manifest.extra["parameter_count"] = result.params.parameter_count()
    manifest.extra["final_train_loss"] = result.curve[-1].train_loss
    manifest.extra["final_val_loss"] = result.curve[-1].val_loss
    _finish(manifest, args.out, metrics_rows, result.curve)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    """学習済みモデルで3段推論"""
    params, _ = load_trained(args.checkpoint)
    manifest = _manifest(args, inputs={"checkpoint": args.checkpoint})

    if args.data:
        dataset, art = load_dataset(args.data)
        inputs = scene_inputs(dataset, art)
        if args.zero_prior:
            inputs = [SceneInput(msi=i.msi, srf=i.srf, prior=None) for i in inputs]
        outputs = reconstruct_many(
            inputs, params, not args.zero_prior, not args.no_refinement, args.precision, args.threads
        )
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, (cube, diag) in enumerate(outputs):
            write_hsi(cube, out_dir / f"scene_{i:03d}.hsi")
            manifest.extra[f"scene_{i:03d}.stage1_fallback"] = diag.stage1_fallback
            if diag.stage3_residual is not None:
                manifest.extra[f"scene_{i:03d}.stage3_residual"] = diag.stage3_residual
        manifest.inputs["data"] = args.data
        manifest.outputs["dir"] = str(out_dir)
        _finish(manifest, out_dir / "predictions")
        return 0

    if not (args.msi and args.srf and args.grid):
        raise InvalidParameter("--data か、--msi/--srf/--grid の組を指定してください")
    msi = read_msi(args.msi)
    grid = parse_grid_spec(args.grid)
    srf = discretize_srf(_load_sensor(args.srf, args.sensor), grid, args.bandwidth)
    prior = _guidance(args, grid)
    [(cube, diag)] = reconstruct_many(
        [SceneInput(msi=msi, srf=srf, prior=prior)],
        params,
        not args.zero_prior,
        not args.no_refinement,
        args.precision,
        1,
    )
    write_hsi(cube, args.out)
    manifest.inputs.update({"msi": args.msi, "srf": args.srf})
    manifest.outputs["hsi"] = args.out
    manifest.extra["stage1_fallback"] = diag.stage1_fallback
    if diag.stage3_residual is not None:
        manifest.extra["stage3_residual"] = diag.stage3_residual
    _finish(manifest, args.out)
    return 0


def _read_pairs(pred_paths: list[str], ref_paths: list[str]) -> tuple[list[HsiCube], list[HsiCube]]:
    if len(pred_paths) != len(ref_paths):
        raise InvalidParameter(f"--pred {len(pred_paths)} 件と --ref {len(ref_paths)} 件の数が一致しません")
    return [read_hsi(p) for p in pred_paths], [read_hsi(r) for r in ref_paths]


def cmd_eval(args: argparse.Namespace) -> int:
    """予測と正解の指標を計算"""
    preds, refs = _read_pairs(args.pred, args.ref)
    report, per_scene = evaluate_scenes(preds, refs)
    _write_metrics(args.out, report, per_scene if len(per_scene) > 1 else None)

    manifest = _manifest(args, inputs={"pred": args.pred, "ref": args.ref}, outputs={"metrics": args.out})
    manifest.add_metrics(report)
    rows = [("eval", -1, report)] + [("eval", i, r) for i, r in enumerate(per_scene)]
    _finish(manifest, args.out, rows)
    logger.info(f"MRAE={report.mrae:.6f} PSNR={report.psnr:.3f} SAM={report.sam:.6f} SSIM={report.ssim:.6f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """誤差マップ・スペクトル比較図を書き出す"""
    import pandas as pd

    [pred], [ref] = _read_pairs([args.pred], [args.ref])
    curve = pd.read_csv(args.curve) if args.curve else None
    written = write_report(pred, ref, args.out, curve)

    manifest = _manifest(
        args,
        inputs={"pred": args.pred, "ref": args.ref},
        outputs={k: str(v) for k, v in written.items()},
    )
    _finish(manifest, Path(args.out) / "report")
    return 0


# ──────────────────────────────────────────
# 引数定義
# ──────────────────────────────────────────

def _common() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=0, help="乱数シード")
    parent.add_argument("--precision", choices=sorted(config.PRECISIONS), default="real64")
    parent.add_argument("--threads", type=int, default=config.DEFAULT_THREADS, help="並列ワーカー数")
    parent.add_argument("--verbose", action="store_true", help="DEBUG ログを出す")
    parent.add_argument("--db", default=None, help="実行記録 DB の URL")
    return parent


def _add_projection_args(p: argparse.ArgumentParser, required: bool = True):
    p.add_argument("--msi", required=required, help="MSI コンテナ")
    p.add_argument("--srf", required=required, help="SRF CSV またはディレクトリ")
    p.add_argument("--sensor", default=None, help="SRF データベース内のセンサー名")
    p.add_argument("--grid", required=required, help="出力波長グリッド start:stop:count (nm)")
    p.add_argument("--bandwidth", type=float, default=None, help="SRF 離散化のカーネル幅 (nm)")
    prior = p.add_mutually_exclusive_group()
    prior.add_argument("--prior", default=None, help="事前分布スペクトル CSV")
    prior.add_argument("--zero-prior", action="store_true", help="ゼロ事前分布 (最小ノルム解)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssrno", description="ハイパースペクトル再構成ツール")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("prior", parents=[common], help="ART 直達日射スペクトルを合成")
    p.add_argument("--e-on", default=None, help="大気外日射 CSV (省略時は黒体近似)")
    p.add_argument("--factors", "--factor", dest="factor", action="append", help="透過率表 kind=CSV (カンマ区切り・複数指定可)")
    p.add_argument("--rayleigh", type=float, default=None, metavar="AIRMASS")
    p.add_argument("--aerosol", type=float, default=None, metavar="AIRMASS")
    p.add_argument("--ozone", type=float, default=None, metavar="AIRMASS")
    p.add_argument("--mixed-gas", type=float, default=None, metavar="AIRMASS")
    p.add_argument("--water-vapor", type=float, default=None, metavar="AIRMASS")
    p.add_argument("--grid", required=True, help="start:stop:count (nm)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("gmp", parents=[common], help="GMP 射影")
    _add_projection_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gmp)

    p = sub.add_parser("synth", parents=[common], help="合成データセット生成")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--srf", default=None, help="SRF データベース (省略時は組み込み)")
    p.add_argument("--sensors", type=int, default=28, help="組み込みデータベースのセンサー数")
    p.add_argument("--art", default=None, help="ART 直達日射 CSV (省略時は参照大気)")
    p.add_argument("--airmass", type=float, default=1.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    defaults = config.DEFAULT_TRAIN_CONFIG
    op_defaults = config.DEFAULT_OPERATOR_CONFIG
    p = sub.add_parser("train", parents=[common], help="オペレータ学習")
    p.add_argument("--data", required=True, help="synth の出力ディレクトリ")
    p.add_argument("--out", required=True, help="チェックポイント")
    p.add_argument("--protocol", choices=["standard", "continuous", "zeroshot", "ablation"], default="standard")
    p.add_argument("--factor", type=int, default=2, help="continuous の間引き率")
    p.add_argument("--cutoff", type=float, default=1000.0, help="zeroshot の学習波長上限 (nm)")
    p.add_argument("--epochs", type=int, default=defaults["epochs"])
    p.add_argument("--batch", type=int, default=defaults["batch"])
    p.add_argument("--patch", type=int, default=defaults["patch"])
    p.add_argument("--lr", type=float, default=defaults["learning_rate"])
    p.add_argument("--lambda-sam", type=float, default=defaults["lambda_sam"])
    p.add_argument("--alpha", type=float, default=defaults["ablation_alpha"])
    p.add_argument("--no-art-prior", action="store_true")
    p.add_argument("--no-refinement", action="store_true")
    p.add_argument("--keep-activations", action="store_true", help="活性化前の値を再計算せずキャッシュする (高速・高メモリ)")
    p.add_argument("--d-modes", type=int, default=op_defaults["d_modes"])
    p.add_argument("--hidden", type=int, default=op_defaults["hidden"])
    p.add_argument("--t-contract", type=int, default=op_defaults["t_contract"])
    p.add_argument("--t-transform", type=int, default=op_defaults["t_transform"])
    p.set_defaults(func=cmd_train, precision=defaults["precision"])

    p = sub.add_parser("infer", parents=[common], help="3段推論")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="synth の出力ディレクトリ (全シーンを推論)")
    _add_projection_args(p, required=False)
    p.add_argument("--no-refinement", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="指標計算")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--out", required=True, help="key=value 指標ファイル")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="誤差マップ・スペクトル図")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--curve", default=None, help="学習曲線 CSV")
    p.add_argument("--out", required=True, help="出力ディレクトリ")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    if args.threads < 1:
        parser.error("--threads は1以上を指定してください")

    if args.db:
        database.configure(args.db)
    try:
        database.init_db()
    except SQLAlchemyError as e:
        logger.warning(f"実行記録 DB を初期化できません: {e}")

    try:
        return args.func(args)
    except SsrnoError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
