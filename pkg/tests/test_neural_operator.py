import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from models.spectral import HsiCube
from services.errors import InvalidParameter, ShapeMismatch
from services.neural_operator import (
    CoordinateGrid,
    OperatorConfig,
    SacLayerParams,
    channel_schedule,
    expansive_backward,
    expansive_forward,
    gelu,
    init_params,
    layer_backward,
    layer_forward,
    operator_backward,
    operator_forward,
    operator_forward_batch,
    params_from_tensors,
    sac_backward,
    sac_forward,
)
from services.numerics import finite_diff_grad

RTOL, ATOL = 1e-4, 1e-7


def _sac(rng, d_in, d_out, d_modes, role="contract"):
    return SacLayerParams(
        role=role,
        fourier_re=rng.standard_normal((d_in, d_out, d_modes)) * 0.5,
        fourier_im=rng.standard_normal((d_in, d_out, d_modes)) * 0.5,
        local_w=rng.standard_normal((d_in, d_out)) * 0.5,
        local_b=rng.standard_normal(d_out) * 0.1,
    )


def _tiny_config(**overrides):
    values = {"d_modes": 3, "hidden": 2, "t_contract": 1, "t_transform": 1, "seed": 4}
    values.update(overrides)
    return OperatorConfig.from_dict(values)


def _circular_reference(x, params, bands):
    """直接の巡回畳み込みによる SAC"""
    m = min(params.d_modes, bands // 2 + 1)
    spectrum = np.zeros((params.d_in, params.d_out, bands // 2 + 1), dtype=np.complex128)
    spectrum[..., :m] = params.fourier_weights[..., :m]
    kernel = np.fft.irfft(spectrum, n=bands, axis=-1)
    out = np.zeros(x.shape[:1] + (params.d_out,) + x.shape[2:])
    for c in range(bands):
        for j in range(bands):
            out[..., c] += np.einsum("bihw,io->bohw", x[..., j], kernel[:, :, (c - j) % bands])
    return out


@pytest.mark.parametrize("bands", [7, 8, 16, 31])
def test_sac_matches_circular_convolution(bands):
    rng = np.random.default_rng(bands)
    for _ in range(25):
        d_in, d_out = rng.integers(1, 5, size=2)
        params = _sac(rng, d_in, d_out, int(rng.integers(1, bands // 2 + 3)))
        x = rng.standard_normal((2, d_in, 2, 3, bands))
        out = sac_forward(x, params)
        expected = _circular_reference(x, params, bands)
        np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-9)


def test_sac_identity_filter_is_exact():
    bands = 9
    d = 3
    weights = np.broadcast_to(np.eye(d)[:, :, None], (d, d, bands // 2 + 1)).copy()
    params = SacLayerParams("contract", weights, np.zeros_like(weights), np.zeros((d, d)), np.zeros(d))
    x = np.random.default_rng(0).standard_normal((1, d, 2, 2, bands))
    np.testing.assert_allclose(sac_forward(x, params), x, atol=1e-10)


def test_mode_truncation_monotone():
    bands = 16
    x = np.random.default_rng(1).standard_normal((1, 1, 1, 1, bands))
    errors = []
    for modes in range(1, bands // 2 + 2):
        ones = np.ones((1, 1, modes))
        params = SacLayerParams("contract", ones, np.zeros_like(ones), np.zeros((1, 1)), np.zeros(1))
        errors.append(np.linalg.norm(sac_forward(x, params) - x))
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-10


def test_sac_zero_weights_reduce_to_pointwise():
    rng = np.random.default_rng(2)
    params = _sac(rng, 2, 3, 4)
    params.fourier_re[:] = 0.0
    params.fourier_im[:] = 0.0
    x = rng.standard_normal((1, 2, 2, 2, 6))
    expected = gelu(np.einsum("bihwc,io->bohwc", x, params.local_w) + params.local_b[None, :, None, None, None])
    np.testing.assert_allclose(layer_forward(x, params), expected, atol=1e-14)


def test_expansive_with_zero_skip_block_equals_plain_layer():
    rng = np.random.default_rng(3)
    full = _sac(rng, 4, 2, 3, role="expand")
    for tensor in (full.fourier_re, full.fourier_im, full.local_w):
        tensor[2:] = 0.0
    half = SacLayerParams(
        "contract", full.fourier_re[:2].copy(), full.fourier_im[:2].copy(), full.local_w[:2].copy(), full.local_b
    )
    x = rng.standard_normal((1, 2, 2, 2, 7))
    skip = rng.standard_normal((1, 2, 2, 2, 7))
    np.testing.assert_allclose(expansive_forward(x, skip, full), layer_forward(x, half), atol=1e-12)
    with pytest.raises(ShapeMismatch):
        expansive_forward(x, skip[..., :6], full)


@pytest.mark.parametrize("bands", [6, 7])
def test_sac_backward_matches_finite_differences(bands):
    rng = np.random.default_rng(bands)
    # DC とナイキストを含む全モード
    params = _sac(rng, 2, 3, bands // 2 + 1)
    x = rng.standard_normal((1, 2, 2, 1, bands))
    upstream = rng.standard_normal((1, 3, 2, 1, bands))
    dx, d_re, d_im = sac_backward(upstream, x, params)

    np.testing.assert_allclose(
        dx, finite_diff_grad(lambda t: float(np.sum(sac_forward(t, params) * upstream)), x), rtol=RTOL, atol=ATOL
    )

    def loss_re(t):
        p = SacLayerParams("contract", t, params.fourier_im, params.local_w, params.local_b)
        return float(np.sum(sac_forward(x, p) * upstream))

    def loss_im(t):
        p = SacLayerParams("contract", params.fourier_re, t, params.local_w, params.local_b)
        return float(np.sum(sac_forward(x, p) * upstream))

    np.testing.assert_allclose(d_re, finite_diff_grad(loss_re, params.fourier_re), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(d_im, finite_diff_grad(loss_im, params.fourier_im), rtol=RTOL, atol=ATOL)


def test_layer_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    params = _sac(rng, 2, 2, 3, role="transform")
    x = rng.standard_normal((1, 2, 1, 2, 6))
    upstream = rng.standard_normal((1, 2, 1, 2, 6))
    dx, grads = layer_backward(upstream, x, params)

    def loss(t):
        return float(np.sum(layer_forward(t, params) * upstream))

    np.testing.assert_allclose(dx, finite_diff_grad(loss, x), rtol=RTOL, atol=ATOL)

    def loss_w(t):
        p = SacLayerParams("transform", params.fourier_re, params.fourier_im, t, params.local_b)
        return float(np.sum(layer_forward(x, p) * upstream))

    def loss_b(t):
        p = SacLayerParams("transform", params.fourier_re, params.fourier_im, params.local_w, t)
        return float(np.sum(layer_forward(x, p) * upstream))

    np.testing.assert_allclose(grads.local_w, finite_diff_grad(loss_w, params.local_w), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(grads.local_b, finite_diff_grad(loss_b, params.local_b), rtol=RTOL, atol=ATOL)


def test_expansive_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    params = _sac(rng, 4, 2, 3, role="expand")
    x = rng.standard_normal((1, 2, 1, 2, 7))
    skip = rng.standard_normal((1, 2, 1, 2, 7))
    upstream = rng.standard_normal((1, 2, 1, 2, 7))
    dx, dskip, _ = expansive_backward(upstream, x, skip, params)

    np.testing.assert_allclose(
        dx,
        finite_diff_grad(lambda t: float(np.sum(expansive_forward(t, skip, params) * upstream)), x),
        rtol=RTOL, atol=ATOL,
    )
    np.testing.assert_allclose(
        dskip,
        finite_diff_grad(lambda t: float(np.sum(expansive_forward(x, t, params) * upstream)), skip),
        rtol=RTOL, atol=ATOL,
    )


@pytest.mark.parametrize("t_contract,t_transform", [(1, 1), (2, 0)])
def test_operator_backward_matches_finite_differences(t_contract, t_transform):
    cfg = _tiny_config(t_contract=t_contract, t_transform=t_transform)
    params = init_params(cfg)
    rng = np.random.default_rng(10)
    # 小さな初期値だと勾配も小さいので、検査用に重みを大きくする
    for _, tensor in params.named_tensors():
        tensor += rng.standard_normal(tensor.shape) * 0.3
    coords = CoordinateGrid(np.linspace(400.0, 900.0, 6)).normalized
    values = rng.random((1, 6, 2, 1))
    upstream = rng.standard_normal((1, 6, 2, 1))

    out, cache = operator_forward_batch(values, coords, params)
    grads, d_values = operator_backward(cache, upstream, params)

    def loss_values(t):
        return float(np.sum(operator_forward_batch(t, coords, params, keep_cache=False)[0] * upstream))

    np.testing.assert_allclose(d_values, finite_diff_grad(loss_values, values), rtol=RTOL, atol=ATOL)

    for (name, tensor), (_, grad) in zip(params.named_tensors(), grads.named_tensors()):
        original = tensor.copy()

        def loss_param(t, tensor=tensor):
            tensor[...] = t
            return loss_values(values)

        numeric = finite_diff_grad(loss_param, original)
        tensor[...] = original
        np.testing.assert_allclose(grad, numeric, rtol=RTOL, atol=ATOL, err_msg=name)


def test_default_channel_schedule():
    schedule = channel_schedule(OperatorConfig.from_dict())
    assert schedule[:4] == [("contract", 32, 64), ("contract", 64, 128), ("contract", 128, 256), ("contract", 256, 512)]
    assert schedule[4:8] == [("transform", 512, 512)] * 4
    assert [d_in for role, d_in, _ in schedule if role == "expand"] == [1024, 512, 256, 128]
    assert schedule[-1] == ("expand", 128, 32)


def test_operator_is_residual_and_resolution_free():
    params = init_params(_tiny_config())
    params.proj.w2[:] = 0.0
    params.proj.b2[:] = 0.0
    for bands in (5, 12):
        grid = np.linspace(400.0, 1000.0, bands)
        cube = HsiCube(grid=grid, data=np.random.default_rng(bands).random((bands, 3, 2)))
        out = operator_forward(cube, CoordinateGrid(grid), params)
        np.testing.assert_array_equal(out.data, cube.data)
        np.testing.assert_array_equal(out.grid, grid)


def test_operator_input_checks():
    params = init_params(_tiny_config())
    with pytest.raises(ShapeMismatch):
        operator_forward_batch(np.zeros((1, 1, 2, 2)), np.zeros(1), params)
    with pytest.raises(ShapeMismatch):
        operator_forward_batch(np.zeros((1, 4, 2, 2)), np.zeros(3), params)
    cube = HsiCube(grid=[400.0, 500.0, 600.0], data=np.zeros((3, 1, 1)))
    with pytest.raises(ShapeMismatch):
        operator_forward(cube, CoordinateGrid([400.0, 500.0, 610.0]), params)


def test_init_is_seeded_and_restorable():
    cfg = _tiny_config()
    first, second = init_params(cfg), init_params(cfg)
    for (name, a), (_, b) in zip(first.named_tensors(), second.named_tensors()):
        np.testing.assert_array_equal(a, b, err_msg=name)
    restored = params_from_tensors(cfg, dict(first.named_tensors()))
    assert restored.parameter_count() == first.parameter_count()
    with pytest.raises(ShapeMismatch):
        params_from_tensors(cfg, {})


def test_config_validation():
    with pytest.raises(InvalidParameter):
        OperatorConfig(d_modes=0)
    with pytest.raises(InvalidParameter):
        OperatorConfig(activation="relu")
    assert CoordinateGrid([400.0, 2500.0]).normalized.tolist() == [0.0, 1.0]


def test_sac_is_linear_in_input():
    rng = np.random.default_rng(12)
    params = _sac(rng, 3, 2, 4)
    x, y = rng.standard_normal((2, 2, 3, 2, 2, 9))
    a, b = 0.7, -1.9
    np.testing.assert_allclose(
        sac_forward(a * x + b * y, params),
        a * sac_forward(x, params) + b * sac_forward(y, params),
        atol=1e-12,
    )


def test_sac_single_precision_path():
    rng = np.random.default_rng(14)
    params = _sac(rng, 2, 3, 4)
    x = rng.standard_normal((1, 2, 2, 2, 10))
    single = SacLayerParams(
        "contract",
        params.fourier_re.astype(np.float32),
        params.fourier_im.astype(np.float32),
        params.local_w.astype(np.float32),
        params.local_b.astype(np.float32),
    )
    out = sac_forward(x.astype(np.float32), single)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, sac_forward(x, params), rtol=1e-4, atol=1e-5)

    dx, d_re, _ = sac_backward(out, x.astype(np.float32), single)
    assert dx.dtype == np.float32 and d_re.dtype == np.float32


def test_zero_upstream_gives_zero_gradients():
    params = init_params(_tiny_config())
    coords = CoordinateGrid(np.linspace(400.0, 900.0, 6)).normalized
    values = np.random.default_rng(15).random((2, 6, 2, 2))
    _, cache = operator_forward_batch(values, coords, params)
    grads, d_values = operator_backward(cache, np.zeros_like(values), params)
    np.testing.assert_array_equal(d_values, 0.0)
    for name, grad in grads.named_tensors():
        np.testing.assert_array_equal(grad, 0.0, err_msg=name)


def test_residual_only_operator_has_unit_input_gradient():
    params = init_params(_tiny_config())
    params.proj.w2[:] = 0.0
    params.proj.b2[:] = 0.0
    coords = CoordinateGrid(np.linspace(400.0, 900.0, 6)).normalized
    values = np.random.default_rng(16).random((1, 6, 3, 2))
    _, cache = operator_forward_batch(values, coords, params)
    _, d_values = operator_backward(cache, np.ones_like(values), params)
    np.testing.assert_array_equal(d_values, 1.0)


def test_recomputed_activations_give_same_gradients():
    params = init_params(_tiny_config(t_contract=2))
    coords = CoordinateGrid(np.linspace(400.0, 900.0, 8)).normalized
    rng = np.random.default_rng(17)
    values = rng.random((2, 8, 2, 2))
    upstream = rng.standard_normal(values.shape)

    out, cached = operator_forward_batch(values, coords, params)
    out_re, lean = operator_forward_batch(values, coords, params, recompute=True)
    np.testing.assert_array_equal(out, out_re)
    assert all(pre is None for pre in lean.layer_pres)

    grads, d_values = operator_backward(cached, upstream, params)
    grads_re, d_values_re = operator_backward(lean, upstream, params)
    np.testing.assert_allclose(d_values_re, d_values, rtol=1e-12, atol=1e-14)
    for (name, a), (_, b) in zip(grads.named_tensors(), grads_re.named_tensors()):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-14, err_msg=name)


def test_layer_role_is_checked():
    rng = np.random.default_rng(18)
    with pytest.raises(InvalidParameter):
        _sac(rng, 2, 2, 3, role="bottleneck")
    with pytest.raises(InvalidParameter):
        layer_forward(rng.standard_normal((1, 2, 1, 1, 5)), _sac(rng, 2, 2, 3, role="expand"))
