"""SSRNO 設定管理モジュール"""
import os
from pathlib import Path

from dotenv import load_dotenv

# .env ファイル読み込み
load_dotenv(override=True)


def _clean(raw: str) -> str:
    return raw.split("#", 1)[0].strip()


def _env_int(key: str, default: int) -> int:
    """環境変数からint取得（不正値はdefault）"""
    raw = os.getenv(key)
    if raw is None:
        return default
    try:
        return int(_clean(raw))
    except ValueError:
        return default


def _env_float(key: str, default: float) -> float:
    """環境変数からfloat取得（不正値はdefault）"""
    raw = os.getenv(key)
    if raw is None:
        return default
    try:
        return float(_clean(raw))
    except ValueError:
        return default


def _env_str(key: str, default: str) -> str:
    """環境変数から文字列取得（空文字はdefault）"""
    raw = os.getenv(key)
    if raw is None:
        return default
    clean = _clean(raw)
    return clean or default


TOOL_VERSION = "0.1.0"

# ── プロジェクトパス ──────────────────────────
BASE_DIR = Path(__file__).resolve().parent
DATA_DIR = Path(_env_str("SSRNO_DATA_DIR", str(BASE_DIR / "data")))
DB_PATH = DATA_DIR / "ssrno.db"

# ディレクトリ自動作成
DATA_DIR.mkdir(parents=True, exist_ok=True)

# ── DB 設定 ────────────────────────────────────
DATABASE_URL = _env_str("SSRNO_DATABASE_URL", f"sqlite:///{DB_PATH}")

# ── ログ・並列 ────────────────────────────────
LOG_LEVEL = _env_str("SSRNO_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
DEFAULT_THREADS = max(1, _env_int("SSRNO_THREADS", os.cpu_count() or 1))

# ── 数値許容誤差 ──────────────────────────────
GMP_TOLERANCE = _env_float("SSRNO_GMP_TOLERANCE", 1e-10)
GMP_TOLERANCE_REAL32 = _env_float("SSRNO_GMP_TOLERANCE_REAL32", 1e-3)
ASSUMPTION_EPS = 1e-12     # 係数の厳密正判定
RANK_TOL = 1e-10           # 最大特異値に対する相対ランク許容
SPD_PIVOT_TOL = 1e-12      # 最大対角成分に対するピボット許容
SAM_CLAMP_DELTA = 1e-7     # arccos クランプ幅
MRAE_FLOOR = 1e-4          # MRAE 分母の下限
PSNR_CAP = 300.0           # MSE=0 時の PSNR (dB)
PSNR_PEAK = 1.0

# ── 波長範囲 (nm) ─────────────────────────────
VALID_RANGE_NM = (280.0, 4000.0)   # 放射伝達モデルの有効範囲
COORD_RANGE_NM = (400.0, 2500.0)   # 座標正規化の基準範囲
SYNTH_RANGE_NM = (400.0, 2500.0)

# ── 精度 ──────────────────────────────────────
PRECISIONS = {"real32": "float32", "real64": "float64"}

# ── ニューラルオペレータ デフォルト ─────────────
DEFAULT_OPERATOR_CONFIG = {
    "d_modes": 16,       # 最大フーリエモード数
    "hidden": 32,        # 隠れチャネル数 d
    "t_contract": 4,     # 縮小・拡大パスの層数 T_c
    "t_transform": 4,    # 変換パスの層数 T_r
    "activation": "gelu",
    "seed": 0,
}

# ── 学習 デフォルト ────────────────────────────
DEFAULT_TRAIN_CONFIG = {
    "lambda_sam": 0.1,        # SAM 項の重み λ
    "ablation_alpha": 0.5,    # 精緻化なしアブレーション時の正則化重み α
    "use_art_prior": True,
    "use_refinement": True,
    "learning_rate": 1e-3,
    "epochs": 10,
    "batch": 4,
    "patch": 32,
    "seed": 0,
    "precision": "real32",           # 学習の計算精度 (評価・推論は real64)
    "recompute_activations": True,   # 逆伝播で活性化前の値を再計算しメモリを抑える
}

# Adam
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# ── 検証オラクル ──────────────────────────────
ORACLE_MAX_ITER = 100_000
ORACLE_STATIONARITY_TOL = 1e-10
ORACLE_RESTARTS = 3

# ── 実験 ──────────────────────────────────────
TRAIN_TIME_BUDGET_S = _env_float("SSRNO_TRAIN_TIME_BUDGET_S", 1800.0)   # 既定構成の学習時間上限
