"""SSRNO 実行記録データベース接続・初期化モジュール"""
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, Session

import config
from models.schemas import Base


def make_engine(url: str):
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, echo=False, connect_args=connect_args)


# エンジン (--db 指定時は configure で差し替え)
engine = make_engine(config.DATABASE_URL)

# セッションファクトリ
SessionLocal = sessionmaker(bind=engine, autocommit=False, autoflush=False)


def configure(url: str):
    """接続先 URL を差し替える"""
    global engine
    engine = make_engine(url)
    SessionLocal.configure(bind=engine)


def init_db():
    """全テーブルを作成（存在しない場合のみ）"""
    Base.metadata.create_all(bind=engine)


def get_session() -> Session:
    """新しいDBセッションを取得"""
    return SessionLocal()
