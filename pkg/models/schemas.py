"""SSRNO 実行記録モデル定義

CLI の各実行 (コマンド・設定・入出力・指標・学習曲線) を
SQLite で索引するための SQLAlchemy モデル。
一次成果物は出力ファイル横のマニフェストで、ここは副次的な索引。
"""
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import DeclarativeBase


class Base(DeclarativeBase):
    """SQLAlchemy 宣言的ベースクラス"""
    pass


class RunRecord(Base):
    """CLI 実行1回分"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String(20), nullable=False, index=True)
    seed = Column(Integer, default=0)
    threads = Column(Integer, default=1)
    precision = Column(String(10), default="real64")
    config_json = Column(Text, default="{}")
    inputs_json = Column(Text, default="{}")
    outputs_json = Column(Text, default="{}")
    manifest_path = Column(String(500), default="")
    tool_version = Column(String(20), default="")
    created_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f"<RunRecord {self.id} {self.command} seed={self.seed}>"


class MetricsRecord(Base):
    """評価指標 (label はプロトコル名や構成名、scene はシーン番号で -1 は平均)"""
    __tablename__ = "metrics"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    label = Column(String(50), default="")
    scene = Column(Integer, default=-1)
    mrae = Column(Float)
    psnr = Column(Float)
    sam = Column(Float)
    ssim = Column(Float)

    def __repr__(self):
        return f"<MetricsRecord run={self.run_id} {self.label} psnr={self.psnr}>"


class EpochLossRecord(Base):
    """学習曲線の1エポック"""
    __tablename__ = "epoch_losses"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    train_loss = Column(Float)
    val_loss = Column(Float)
