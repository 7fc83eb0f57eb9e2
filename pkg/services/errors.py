"""SSRNO 例外定義

CLI はクラスごとの exit_code をそのまま終了コードとして使う。
"""


class SsrnoError(Exception):
    """SSRNO 共通の基底例外"""
    exit_code = 1

    def __init__(self, message: str, **context):
        self.message = message
        self.context = context
        super().__init__(message)


# ── 入力形式 ──────────────────────────────────
class ParseError(SsrnoError):
    """CSV の書式不正"""
    exit_code = 10


class NegativeSensitivity(SsrnoError):
    """SRF に負の感度が含まれる"""
    exit_code = 11


class FormatError(SsrnoError):
    """コンテナヘッダ不正"""
    exit_code = 12


class TruncatedPayload(SsrnoError):
    """コンテナのペイロード不足"""
    exit_code = 13


class IoError(SsrnoError):
    """ファイル読み書き失敗"""
    exit_code = 14


class EmptySamples(SsrnoError):
    """サンプルが空"""
    exit_code = 15


class EmptySpectrum(SsrnoError):
    """スペクトルが空または全てゼロ"""
    exit_code = 16


# ── 形状 ──────────────────────────────────────
class ShapeMismatch(SsrnoError):
    """配列形状の不一致"""
    exit_code = 20


class GridMismatch(SsrnoError):
    """波長グリッドの不一致"""
    exit_code = 21


class PatchTooLarge(SsrnoError):
    """パッチサイズが画像より大きい"""
    exit_code = 22


# ── 数値 ──────────────────────────────────────
class NotPositiveDefinite(SsrnoError):
    """対称正定値でない"""
    exit_code = 30


class RankDeficient(SsrnoError):
    """SRF 行列が行フルランクでない"""
    exit_code = 31


class DegenerateBand(SsrnoError):
    """離散化後の行和がほぼゼロ"""
    exit_code = 32


class FeasibilityViolation(SsrnoError):
    """射影結果が SY=X を満たさない"""
    exit_code = 33

    def __init__(self, residual: float, tolerance: float):
        super().__init__(
            f"実行可能性違反: 残差 {residual:.3e} > 許容 {tolerance:.3e}",
            residual=residual,
            tolerance=tolerance,
        )
        self.residual = residual
        self.tolerance = tolerance


class NoConvergence(SsrnoError):
    """反復法が収束しない"""
    exit_code = 34


class NonFiniteValue(SsrnoError):
    """関数値が有限でない"""
    exit_code = 35


class NonFiniteLoss(SsrnoError):
    """学習中の損失が有限でない"""
    exit_code = 36

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"損失が有限でない: epoch={epoch} batch={batch} value={value}",
            epoch=epoch,
            batch=batch,
            value=value,
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value


# ── 値域 ──────────────────────────────────────
class OutOfRange(SsrnoError):
    """波長が有効範囲外"""
    exit_code = 40


class InvalidTransmittance(SsrnoError):
    """透過率が [0,1] 外"""
    exit_code = 41


class InvalidParameter(SsrnoError):
    """パラメータが前提条件を満たさない"""
    exit_code = 42
