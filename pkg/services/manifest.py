"""SSRNO 実行マニフェスト

出力ファイルの横に置く key=value テキスト (一次成果物、時刻を含まない) と、
実行記録データベースへの登録。
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from config import TOOL_VERSION
from db.database import get_session
from models.schemas import EpochLossRecord, MetricsRecord, RunRecord
from services.errors import IoError, ParseError
from services.metrics import MetricsReport

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.txt"


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


@dataclass
class RunManifest:
    """1コマンド分の再現情報"""
    command: str
    seed: int = 0
    threads: int = 1
    precision: str = "real64"
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    def add_metrics(self, report: MetricsReport, label: str = ""):
        prefix = f"{label}." if label else ""
        for key, value in report.to_dict().items():
            self.metrics[f"{prefix}{key}"] = value

    def to_lines(self) -> list[str]:
        lines = [
            f"command={self.command}",
            f"tool_version={self.tool_version}",
            f"seed={self.seed}",
            f"threads={self.threads}",
            f"precision={self.precision}",
        ]
        for section, values in (
            ("config", self.config),
            ("input", self.inputs),
            ("output", self.outputs),
            ("metric", self.metrics),
            ("extra", self.extra),
        ):
            lines += [f"{section}.{k}={_format(values[k])}" for k in sorted(values)]
        return lines

    def write(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoError(f"マニフェスト書き込み失敗: {path}: {e}") from e
        logger.info(f"マニフェスト書き込み: {path}")
        return path


def manifest_path(output) -> Path:
    p = Path(output)
    return p.with_name(p.name + MANIFEST_SUFFIX)


def read_manifest(path) -> dict[str, str]:
    """マニフェストを平坦な辞書として読む"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"マニフェスト読み込み失敗: {path}: {e}") from e
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{n}: key=value 形式ではありません")
        key, value = line.split("=", 1)
        values[key] = value
    return values


def record_run(
    manifest: RunManifest,
    path: Optional[Path] = None,
    metrics: Optional[list[tuple[str, int, MetricsReport]]] = None,
    curve: Optional[list] = None,
) -> int:
    """実行記録を DB に登録

    Args:
        metrics: (ラベル, シーン番号, 指標) のリスト
        curve: EpochLoss のリスト
    Returns:
        RunRecord の id
    """
    session = get_session()
    try:
        run = RunRecord(
            command=manifest.command,
            seed=manifest.seed,
            threads=manifest.threads,
            precision=manifest.precision,
            config_json=json.dumps(manifest.config, sort_keys=True, default=str),
            inputs_json=json.dumps(manifest.inputs, sort_keys=True, default=str),
            outputs_json=json.dumps(manifest.outputs, sort_keys=True, default=str),
            manifest_path=str(path or ""),
            tool_version=manifest.tool_version,
        )
        session.add(run)
        session.flush()
        for label, scene, report in metrics or []:
            session.add(MetricsRecord(run_id=run.id, label=label, scene=scene, **report.to_dict()))
        for entry in curve or []:
            session.add(EpochLossRecord(
                run_id=run.id,
                epoch=entry.epoch,
                train_loss=entry.train_loss,
                val_loss=entry.val_loss,
            ))
        session.commit()
        run_id = run.id
        logger.debug(f"実行記録登録: run_id={run_id} ({manifest.command})")
    except Exception as e:
        session.rollback()
        logger.error(f"実行記録登録エラー: {e}")
        raise
    finally:
        session.close()
    return run_id
