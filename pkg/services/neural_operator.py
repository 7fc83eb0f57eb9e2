"""SSRNO ニューラルオペレータ

持ち上げ MLP → U 字型の SAC (spectral-aware convolution) 層 → 射影 MLP を
numpy で実装し、学習用の逆伝播を層の種類ごとに明示的に書く。

テンソルは (B, ch, H, W, C) の並び。フーリエ変換はバンド軸 (最終軸) のみに掛け、
空間・スペクトル解像度は U の各段で変えずにチャネル幅だけを倍・半分にする。
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

import config
from models.spectral import HsiCube
from services.errors import InvalidParameter, ShapeMismatch
from services.numerics import irfft_bands, n_modes, rfft_bands

logger = logging.getLogger(__name__)

ROLES = ("contract", "transform", "expand")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ──────────────────────────────────────────
# 設定・座標
# ──────────────────────────────────────────

@dataclass
class OperatorConfig:
    """オペレータのハイパーパラメータ"""
    d_modes: int = 16
    hidden: int = 32
    t_contract: int = 4
    t_transform: int = 4
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.d_modes < 1:
            raise InvalidParameter(f"d_modes は1以上: {self.d_modes}")
        if self.hidden < 1:
            raise InvalidParameter(f"hidden は1以上: {self.hidden}")
        if self.t_contract < 1:
            raise InvalidParameter(f"t_contract は1以上: {self.t_contract}")
        if self.t_transform < 0:
            raise InvalidParameter(f"t_transform は0以上: {self.t_transform}")
        if self.activation != "gelu":
            raise InvalidParameter(f"未対応の活性化関数: {self.activation}")

    @classmethod
    def from_dict(cls, values: Optional[dict] = None) -> "OperatorConfig":
        merged = {**config.DEFAULT_OPERATOR_CONFIG, **(values or {})}
        return cls(**{k: merged[k] for k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class CoordinateGrid:
    """波長座標と正規化座標 w̃ = (λ−400)/(2500−400)"""
    wavelengths_nm: np.ndarray
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64).reshape(-1)
        if wl.size == 0 or not np.all(np.isfinite(wl)):
            raise ShapeMismatch("座標グリッドが空または有限でない値を含みます")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ShapeMismatch("座標グリッドが狭義単調増加ではありません")
        lo, hi = config.COORD_RANGE_NM
        self.wavelengths_nm = wl
        self.normalized = (wl - lo) / (hi - lo)

    def __len__(self) -> int:
        return int(self.wavelengths_nm.size)


# ──────────────────────────────────────────
# パラメータ
# ──────────────────────────────────────────

@dataclass
class MlpParams:
    """2層 MLP (d_in → hidden → d_out, 中間のみ活性化)"""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class SacLayerParams:
    """SAC 層: 複素フーリエ重み (実部・虚部で保持) + 点ごとの線形写像"""
    role: str
    fourier_re: np.ndarray   # (d_in, d_out, d_modes)
    fourier_im: np.ndarray
    local_w: np.ndarray      # (d_in, d_out)
    local_b: np.ndarray      # (d_out,)

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidParameter(f"未知の層の役割: {self.role} (候補: {', '.join(ROLES)})")

    @property
    def d_in(self) -> int:
        return self.local_w.shape[0]

    @property
    def d_out(self) -> int:
        return self.local_w.shape[1]

    @property
    def d_modes(self) -> int:
        return self.fourier_re.shape[2]

    @property
    def fourier_weights(self) -> np.ndarray:
        return self.fourier_re + 1j * self.fourier_im

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("fourier_re", self.fourier_re),
            ("fourier_im", self.fourier_im),
            ("local_w", self.local_w),
            ("local_b", self.local_b),
        ]


@dataclass
class OperatorParams:
    """オペレータ全体のパラメータ"""
    config: OperatorConfig
    lift: MlpParams
    layers: list[SacLayerParams]
    proj: MlpParams

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """オプティマイザとチェックポイントが使う正準順のテンソル一覧 (参照)"""
        out = [(f"lift.{n}", t) for n, t in self.lift.tensors()]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", t) for n, t in layer.tensors()]
        out += [(f"proj.{n}", t) for n, t in self.proj.tensors()]
        return out

    def parameter_count(self) -> int:
        return int(sum(t.size for _, t in self.named_tensors()))

    def map(self, fn) -> "OperatorParams":
        """全テンソルに fn を適用した新しいパラメータ"""
        def mlp(p: MlpParams) -> MlpParams:
            return MlpParams(fn(p.w1), fn(p.b1), fn(p.w2), fn(p.b2))

        layers = [
            SacLayerParams(
                role=l.role,
                fourier_re=fn(l.fourier_re),
                fourier_im=fn(l.fourier_im),
                local_w=fn(l.local_w),
                local_b=fn(l.local_b),
            )
            for l in self.layers
        ]
        return OperatorParams(config=self.config, lift=mlp(self.lift), layers=layers, proj=mlp(self.proj))

    def zeros_like(self) -> "OperatorParams":
        return self.map(np.zeros_like)

    def copy(self) -> "OperatorParams":
        return self.map(np.copy)

    def astype(self, dtype) -> "OperatorParams":
        return self.map(lambda t: t.astype(dtype))


def channel_schedule(cfg: OperatorConfig) -> list[tuple[str, int, int]]:
    """U 字の (役割, 入力チャネル, 出力チャネル) 列

    拡大層の入力チャネルはスキップ連結後の幅。拡大層 k は同じ幅の
    縮小パス出力 Ỹ_{T_c−k} と連結する。
    """
    d, tc = cfg.hidden, cfg.t_contract
    schedule = [("contract", d * 2 ** t, d * 2 ** (t + 1)) for t in range(tc)]
    schedule += [("transform", d * 2 ** tc, d * 2 ** tc)] * cfg.t_transform
    for k in range(tc):
        width = d * 2 ** (tc - k)
        schedule.append(("expand", 2 * width, width // 2))
    return schedule


def _disc(rng: np.random.Generator, shape, radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=shape))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return r * np.cos(theta), r * np.sin(theta)


def _uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def _init_mlp(rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> MlpParams:
    return MlpParams(
        w1=_uniform(rng, d_in, hidden),
        b1=np.zeros(hidden),
        w2=_uniform(rng, hidden, d_out),
        b2=np.zeros(d_out),
    )


def init_params(cfg: Optional[OperatorConfig] = None) -> OperatorParams:
    """シード固定でパラメータを初期化

    フーリエ重みは半径 1/(d_in·d_modes) の円板内で一様、点ごとの重みは ±1/√d_in で一様、
    バイアスはゼロ。
    """
    cfg = cfg or OperatorConfig.from_dict()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.hidden
    lift = _init_mlp(rng, 2, d, d)
    layers = []
    for role, d_in, d_out in channel_schedule(cfg):
        re, im = _disc(rng, (d_in, d_out, cfg.d_modes), 1.0 / (d_in * cfg.d_modes))
        layers.append(SacLayerParams(
            role=role,
            fourier_re=re,
            fourier_im=im,
            local_w=_uniform(rng, d_in, d_out),
            local_b=np.zeros(d_out),
        ))
    proj = _init_mlp(rng, d, d, 1)
    params = OperatorParams(config=cfg, lift=lift, layers=layers, proj=proj)
    logger.debug(f"オペレータ初期化: {len(layers)}層, パラメータ数 {params.parameter_count()}")
    return params


def params_from_tensors(cfg: OperatorConfig, tensors: dict[str, np.ndarray]) -> OperatorParams:
    """チェックポイントのテンソル辞書からパラメータを復元"""
    template = init_params(cfg)
    restored = {}
    for name, current in template.named_tensors():
        if name not in tensors:
            raise ShapeMismatch(f"チェックポイントにテンソル {name} がありません")
        value = np.asarray(tensors[name])
        if value.shape != current.shape:
            raise ShapeMismatch(f"{name}: 形状 {value.shape} != 期待 {current.shape}")
        restored[id(current)] = value.copy()
    return template.map(lambda t: restored[id(t)])


# ──────────────────────────────────────────
# 活性化
# ──────────────────────────────────────────

def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


# ──────────────────────────────────────────
# 点ごとの線形写像・MLP
# ──────────────────────────────────────────

def _pointwise(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bihwc,io->bohwc", x, w) + b[None, :, None, None, None]


def _pointwise_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = np.einsum("bohwc,io->bihwc", g, w)
    dw = np.einsum("bihwc,bohwc->io", x, g)
    db = g.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


def _mlp_forward(x: np.ndarray, p: MlpParams):
    pre = _pointwise(x, p.w1, p.b1)
    h = gelu(pre)
    return _pointwise(h, p.w2, p.b2), (x, pre, h)


def _mlp_backward(g: np.ndarray, cache, p: MlpParams):
    x, pre, h = cache
    dh, dw2, db2 = _pointwise_backward(g, h, p.w2)
    dpre = dh * gelu_grad(pre)
    dx, dw1, db1 = _pointwise_backward(dpre, x, p.w1)
    return dx, MlpParams(dw1, db1, dw2, db2)


# ──────────────────────────────────────────
# SAC
# ──────────────────────────────────────────

def _check_input(x: np.ndarray, d_in: int):
    if x.ndim != 5:
        raise ShapeMismatch(f"入力は (B, ch, H, W, C) の5次元が必要です: {x.shape}")
    if x.shape[1] != d_in:
        raise ShapeMismatch(f"入力チャネル {x.shape[1]} != 層の入力チャネル {d_in}")


def active_modes(d_modes: int, bands: int) -> int:
    """実際に使うモード数 min(d_modes, ⌊C/2⌋+1)"""
    return min(d_modes, n_modes(bands))


def _mode_weights(bands: int) -> np.ndarray:
    """irfft の各モードの重複度 (DC と偶数 C のナイキストは1、他は2)"""
    c = np.full(n_modes(bands), 2.0)
    c[0] = 1.0
    if bands % 2 == 0:
        c[-1] = 1.0
    return c


def sac_forward(x: np.ndarray, params: SacLayerParams, d_modes: Optional[int] = None) -> np.ndarray:
    """バンド軸のフーリエ領域で入力チャネルをモードごとに縮約し、高次モードを捨てて逆変換"""
    _check_input(x, params.d_in)
    bands = x.shape[-1]
    m = active_modes(min(d_modes or params.d_modes, params.d_modes), bands)
    real = np.result_type(x.dtype, params.fourier_re.dtype)
    xt = rfft_bands(x.astype(real, copy=False))
    yt = np.zeros(x.shape[:1] + (params.d_out,) + x.shape[2:-1] + (n_modes(bands),), dtype=xt.dtype)
    yt[..., :m] = np.einsum("bixyz,ioz->boxyz", xt[..., :m], params.fourier_weights[..., :m].astype(xt.dtype))
    return irfft_bands(yt, bands).astype(real, copy=False)


def sac_backward(
    g: np.ndarray,
    x: np.ndarray,
    params: SacLayerParams,
    d_modes: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SAC の逆伝播

    Returns:
        (入力勾配, フーリエ重み実部の勾配, 虚部の勾配)
    """
    bands = x.shape[-1]
    m = active_modes(min(d_modes or params.d_modes, params.d_modes), bands)
    real = np.result_type(x.dtype, g.dtype, params.fourier_re.dtype)
    weights = _mode_weights(bands).astype(real)
    scale = weights / bands

    # 出力スペクトルに対する複素勾配 ∂L/∂Re + i ∂L/∂Im
    gy_t = rfft_bands(g.astype(real, copy=False)) * scale
    xt = rfft_bands(x.astype(real, copy=False))

    g_w = np.einsum("boxyz,bixyz->ioz", gy_t[..., :m], np.conj(xt[..., :m]))
    grad_re = np.zeros_like(params.fourier_re)
    grad_im = np.zeros_like(params.fourier_im)
    grad_re[..., :m] = g_w.real
    grad_im[..., :m] = g_w.imag

    gx_t = np.zeros(xt.shape, dtype=xt.dtype)
    gx_t[..., :m] = np.einsum(
        "boxyz,ioz->bixyz", gy_t[..., :m], np.conj(params.fourier_weights[..., :m]).astype(xt.dtype)
    )
    dx = (bands * irfft_bands(gx_t / weights, bands)).astype(real, copy=False)
    return dx, grad_re, grad_im


# ──────────────────────────────────────────
# 層
# ──────────────────────────────────────────

def _layer_pre(x: np.ndarray, params: SacLayerParams, d_modes: Optional[int]) -> np.ndarray:
    return _pointwise(x, params.local_w, params.local_b) + sac_forward(x, params, d_modes)


def layer_forward(
    x: np.ndarray,
    params: SacLayerParams,
    role: Optional[str] = None,
    d_modes: Optional[int] = None,
) -> np.ndarray:
    """σ(L_t(x) + SAC_t(x)) (縮小・変換層)"""
    role = role or params.role
    if role not in ROLES[:2]:
        raise InvalidParameter(f"layer_forward の役割が不正です: {role}")
    _check_input(x, params.d_in)
    return gelu(_layer_pre(x, params, d_modes))


def layer_backward(
    g: np.ndarray,
    x: np.ndarray,
    params: SacLayerParams,
    d_modes: Optional[int] = None,
    pre: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SacLayerParams]:
    """layer_forward の逆伝播 (入力勾配, パラメータ勾配)"""
    if pre is None:
        pre = _layer_pre(x, params, d_modes)
    gpre = g * gelu_grad(pre)
    dx_local, dw, db = _pointwise_backward(gpre, x, params.local_w)
    dx_sac, d_re, d_im = sac_backward(gpre, x, params, d_modes)
    grads = SacLayerParams(role=params.role, fourier_re=d_re, fourier_im=d_im, local_w=dw, local_b=db)
    return dx_local + dx_sac, grads


def _concat(x: np.ndarray, skip: np.ndarray) -> np.ndarray:
    if x.ndim != 5 or skip.ndim != 5:
        raise ShapeMismatch("拡大層の入力とスキップは5次元が必要です")
    if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
        raise ShapeMismatch(f"入力 {x.shape} とスキップ {skip.shape} の (B, H, W, C) が不一致")
    return np.concatenate([x, skip], axis=1)


def expansive_forward(
    x: np.ndarray,
    skip: np.ndarray,
    params: SacLayerParams,
    d_modes: Optional[int] = None,
) -> np.ndarray:
    """σ(L_t(Concat(x, skip)) + SAC_t(Concat(x, skip)))"""
    xc = _concat(x, skip)
    _check_input(xc, params.d_in)
    return gelu(_layer_pre(xc, params, d_modes))


def expansive_backward(
    g: np.ndarray,
    x: np.ndarray,
    skip: np.ndarray,
    params: SacLayerParams,
    d_modes: Optional[int] = None,
    pre: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, SacLayerParams]:
    """expansive_forward の逆伝播 (入力勾配, スキップ勾配, パラメータ勾配)"""
    xc = _concat(x, skip)
    dxc, grads = layer_backward(g, xc, params, d_modes, pre)
    split = x.shape[1]
    return dxc[:, :split], dxc[:, split:], grads


# ──────────────────────────────────────────
# オペレータ全体
# ──────────────────────────────────────────

@dataclass
class ForwardCache:
    """逆伝播用に保持する中間値"""
    values: np.ndarray
    lift: tuple
    layer_inputs: list
    layer_pres: list
    skip_index: dict
    proj: tuple
    d_modes: int


def operator_forward_batch(
    values: np.ndarray,
    coords: np.ndarray,
    params: OperatorParams,
    keep_cache: bool = True,
    recompute: bool = False,
) -> tuple[np.ndarray, Optional[ForwardCache]]:
    """バッチ版の順伝播

    Args:
        values: Ȳ (B, C, H, W)
        coords: 正規化波長座標 (C,)
        recompute: True なら活性化前の値をキャッシュせず逆伝播で再計算する (メモリ半減)
    Returns:
        (Ỹ (B, C, H, W), 逆伝播用キャッシュ)
    """
    values = np.asarray(values)
    if values.ndim != 4:
        raise ShapeMismatch(f"入力は (B, C, H, W) が必要です: {values.shape}")
    coords = np.asarray(coords, dtype=values.dtype).reshape(-1)
    b, c, h, w = values.shape
    if coords.size != c:
        raise ShapeMismatch(f"座標数 {coords.size} != バンド数 {c}")
    if c < 2:
        raise ShapeMismatch(f"バンド数は2以上が必要です: {c}")

    cfg = params.config
    tc = cfg.t_contract
    vals = np.transpose(values, (0, 2, 3, 1))[:, None]          # (B,1,H,W,C)
    grid = np.broadcast_to(coords, vals.shape)
    a = np.concatenate([vals, grid], axis=1)                     # (B,2,H,W,C)

    v, lift_cache = _mlp_forward(a, params.lift)
    skips = [v]
    inputs, pres, skip_index = [], [], {}
    for i, layer in enumerate(params.layers):
        if layer.role == "expand":
            k = i - tc - cfg.t_transform
            skip_index[i] = tc - k
            x_in = _concat(v, skips[tc - k])
        else:
            x_in = v
        _check_input(x_in, layer.d_in)
        pre = _layer_pre(x_in, layer, cfg.d_modes)
        v = gelu(pre)
        if keep_cache:
            inputs.append(x_in)
            pres.append(None if recompute else pre)
        if layer.role == "contract":
            skips.append(v)

    out, proj_cache = _mlp_forward(v, params.proj)
    result = (values + np.transpose(out[:, 0], (0, 3, 1, 2))).astype(values.dtype, copy=False)

    cache = None
    if keep_cache:
        cache = ForwardCache(
            values=values,
            lift=lift_cache,
            layer_inputs=inputs,
            layer_pres=pres,
            skip_index=skip_index,
            proj=proj_cache,
            d_modes=cfg.d_modes,
        )
    return result, cache


def operator_backward(
    cache: ForwardCache,
    upstream: np.ndarray,
    params: OperatorParams,
) -> tuple[OperatorParams, np.ndarray]:
    """逆伝播

    Args:
        cache: operator_forward_batch のキャッシュ
        upstream: 出力 Ỹ に対する勾配 (B, C, H, W)
    Returns:
        (パラメータ勾配, 入力 Ȳ に対する勾配 (B, C, H, W))
    """
    upstream = np.asarray(upstream)
    if upstream.shape != cache.values.shape:
        raise ShapeMismatch(f"上流勾配 {upstream.shape} != 出力 {cache.values.shape}")
    cfg = params.config
    tc = cfg.t_contract

    g_out = np.transpose(upstream, (0, 2, 3, 1))[:, None]
    g, proj_grads = _mlp_backward(g_out, cache.proj, params.proj)

    # skip_grads[j] は Ỹ_j (j=0 は持ち上げ出力) に流れ込むスキップ勾配
    skip_grads: dict[int, np.ndarray] = {}
    layer_grads: list[Optional[SacLayerParams]] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.role == "contract":
            j = i + 1
            if j in skip_grads:
                g = g + skip_grads.pop(j)
        dx, layer_grads[i] = layer_backward(
            g, cache.layer_inputs[i], layer, cache.d_modes, cache.layer_pres[i]
        )
        if layer.role == "expand":
            split = dx.shape[1] // 2
            j = cache.skip_index[i]
            skip_grads[j] = skip_grads.get(j, 0) + dx[:, split:]
            dx = dx[:, :split]
        g = dx
    if 0 in skip_grads:
        g = g + skip_grads.pop(0)

    da, lift_grads = _mlp_backward(g, cache.lift, params.lift)
    d_values = upstream + np.transpose(da[:, 0], (0, 3, 1, 2))
    grads = OperatorParams(config=cfg, lift=lift_grads, layers=layer_grads, proj=proj_grads)
    return grads, d_values


def operator_forward(y_bar: HsiCube, grid: CoordinateGrid, params: OperatorParams) -> HsiCube:
    """Ỹ = R_no(Ȳ, w) + Ȳ (出力グリッドは入力と同一)"""
    if len(grid) != y_bar.c_bands or not np.allclose(grid.wavelengths_nm, y_bar.grid, rtol=0, atol=1e-9):
        raise ShapeMismatch("座標グリッドと入力キューブの波長が一致しません")
    out, _ = operator_forward_batch(y_bar.data[None], grid.normalized, params, keep_cache=False)
    return y_bar.with_data(out[0])
