import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from models.spectral import HsiCube
from services.art_prior import reference_beam_irradiance
from services.errors import GridMismatch, InvalidParameter, NonFiniteLoss, ShapeMismatch
from services.neural_operator import CoordinateGrid, OperatorConfig, init_params
from services.pipeline import (
    SceneInput,
    art_prior,
    evaluate_scenes,
    gmp_baseline,
    reconstruct_many,
    reconstruct_scene,
    scene_inputs,
    stage1_upsample,
    stage2_reconstruct,
    stage3_refine,
    tolerance_for,
)
from services.protocols import (
    protocol_ablation,
    protocol_continuous,
    protocol_zeroshot,
    restrict_dataset,
)
from services.srf_registry import builtin_srf_database, degrade
from services.synthetic import load_dataset, save_dataset, synth_dataset, synth_grid
from services.training import (
    AdamOptimizer,
    TrainConfig,
    load_trained,
    save_trained,
    split_scenes,
    train,
)

BANDS = 12
TINY = {"d_modes": 3, "hidden": 2, "t_contract": 1, "t_transform": 1, "seed": 0}


@pytest.fixture(scope="module")
def toy():
    grid = synth_grid(BANDS)
    art = reference_beam_irradiance(grid)
    srf_db = builtin_srf_database(seed=0, count=3)
    return synth_dataset(0, 3, 8, BANDS, srf_db, art, grid), art, srf_db


def _train_config(**overrides):
    values = {"epochs": 2, "batch": 2, "patch": 8, "seed": 0}
    values.update(overrides)
    return TrainConfig.from_dict(values)


# ──────────────────────────────────────────
# 合成データ
# ──────────────────────────────────────────

def test_synth_dataset_is_seeded_and_consistent(toy):
    dataset, art, srf_db = toy
    again = synth_dataset(0, 3, 8, BANDS, srf_db, art, synth_grid(BANDS))
    for a, b in zip(dataset, again):
        np.testing.assert_array_equal(a.hsi.data, b.hsi.data)
        assert a.name == b.name
    for scene in dataset:
        assert scene.hsi.data.min() >= 0.0 and scene.hsi.data.max() <= 1.0
        np.testing.assert_allclose(scene.msi.data, degrade(scene.srf, scene.hsi).data)


def test_dataset_save_and_load(toy, tmp_path):
    dataset, art, srf_db = toy
    paths = save_dataset(dataset, tmp_path, srf_db, art)
    assert paths["index"].name == "dataset.csv"
    loaded, loaded_art = load_dataset(tmp_path)
    assert [s.name for s in loaded] == [s.name for s in dataset]
    np.testing.assert_array_equal(loaded[1].hsi.data, dataset[1].hsi.data)
    np.testing.assert_allclose(loaded[1].srf.data, dataset[1].srf.data, atol=1e-15)
    np.testing.assert_allclose(loaded_art.values, art.values)


# ──────────────────────────────────────────
# ステージ
# ──────────────────────────────────────────

def test_stage1_is_feasible(toy):
    scene = toy[0][0]
    y_bar = stage1_upsample(scene.msi, scene.srf, art_prior(scene.srf.grid))
    residual = np.tensordot(scene.srf.data, y_bar.data, axes=(1, 0)) - scene.msi.data
    assert np.abs(residual).max() <= 1e-10


def test_stage3_restores_hard_constraint(toy):
    rng = np.random.default_rng(0)
    scenes = toy[0]
    for i in range(100):
        scene = scenes[i % len(scenes)]
        truth = scene.hsi.with_data(rng.random((BANDS, 4, 4)))
        msi = degrade(scene.srf, truth)
        y_tilde = truth.with_data(truth.data + rng.standard_normal(truth.data.shape) * 2.0)
        before = np.abs(np.tensordot(scene.srf.data, y_tilde.data, axes=(1, 0)) - msi.data).max()
        refined = stage3_refine(y_tilde, scene.srf, msi)
        after = np.abs(np.tensordot(scene.srf.data, refined.data, axes=(1, 0)) - msi.data).max()
        assert before > 0.1
        assert after <= 1e-10 * max(1.0, np.abs(msi.data).max())


def test_stage2_identity_without_params(toy):
    scene = toy[0][0]
    assert stage2_reconstruct(scene.hsi, CoordinateGrid(scene.hsi.grid), None) is scene.hsi


def test_reconstruct_scene_toggles(toy):
    scene = toy[0][0]
    prior = art_prior(scene.srf.grid)
    baseline, diag = reconstruct_scene(scene.msi, scene.srf, prior)
    np.testing.assert_array_equal(baseline.data, stage1_upsample(scene.msi, scene.srf, prior).data)
    assert diag.stage3_residual is None

    params = init_params(OperatorConfig.from_dict(TINY))
    refined, diag = reconstruct_scene(scene.msi, scene.srf, prior, params)
    assert diag.stage3_residual <= 1e-10
    unrefined, diag = reconstruct_scene(scene.msi, scene.srf, prior, params, use_refinement=False)
    assert diag.stage3_fallback is None

    zero, _ = reconstruct_scene(scene.msi, scene.srf, prior, use_art_prior=False)
    assert not np.array_equal(zero.data, baseline.data)

    single, _ = reconstruct_scene(scene.msi, scene.srf, prior, params, precision="real32")
    assert single.data.dtype == np.float32


def test_reconstruct_many_is_ordered_and_thread_independent(toy):
    dataset, art, _ = toy
    params = init_params(OperatorConfig.from_dict(TINY))
    inputs = scene_inputs(dataset, art)
    serial = reconstruct_many(inputs, params, threads=1)
    parallel = reconstruct_many(inputs, params, threads=3)
    for (a, _), (b, _) in zip(serial, parallel):
        np.testing.assert_array_equal(a.data, b.data)
    report, per_scene = evaluate_scenes([c for c, _ in serial], [s.hsi for s in dataset])
    assert len(per_scene) == 3
    assert np.isfinite(report.psnr)


def test_gmp_baseline_and_tolerance(toy):
    dataset, art, _ = toy
    with_art = gmp_baseline(dataset, art)
    assert np.isfinite(with_art.sam)
    assert tolerance_for("real64") == 1e-10
    with pytest.raises(InvalidParameter):
        tolerance_for("real16")
    prior = art_prior(dataset[0].srf.grid, art)
    assert prior.n_pixels == 1
    assert prior.data.max() == pytest.approx(1.0)


# ──────────────────────────────────────────
# 学習
# ──────────────────────────────────────────

def test_split_holds_out_last_quarter(toy):
    dataset = toy[0]
    train_set, val_set = split_scenes(dataset)
    assert len(train_set) == 2 and val_set == dataset[2:]
    only, same = split_scenes(dataset[:1])
    assert only == same == dataset[:1]


def test_train_is_deterministic(toy):
    dataset, art, _ = toy
    op = OperatorConfig.from_dict(TINY)
    first = train(_train_config(), dataset, op, art)
    second = train(_train_config(), dataset, op, art)
    assert len(first.curve) == 2
    assert [e.train_loss for e in first.curve] == [e.train_loss for e in second.curve]
    for (name, a), (_, b) in zip(first.params.named_tensors(), second.params.named_tensors()):
        np.testing.assert_array_equal(a, b, err_msg=name)
    assert list(first.curve_frame().columns) == ["epoch", "train_loss", "val_loss"]


def test_train_reports_progress_and_regularized_mode(toy):
    dataset, art, _ = toy
    seen = []
    result = train(
        _train_config(use_refinement=False, epochs=1),
        dataset,
        OperatorConfig.from_dict(TINY),
        art,
        progress_callback=seen.append,
    )
    assert seen == result.curve
    assert np.isfinite(result.curve[0].val_loss)


def test_train_raises_on_non_finite_loss(toy, mocker):
    dataset, art, _ = toy
    mocker.patch("services.training._objective", return_value=(float("nan"), None))
    with pytest.raises(NonFiniteLoss) as info:
        train(_train_config(), dataset, OperatorConfig.from_dict(TINY), art)
    assert info.value.epoch == 1
    assert info.value.batch == 0


def test_train_rejects_mixed_grids(toy):
    dataset = toy[0]
    mixed = [dataset[0], restrict_dataset(dataset[1:2], range(0, BANDS, 2))[0]]
    with pytest.raises(GridMismatch):
        train(_train_config(), mixed, OperatorConfig.from_dict(TINY))


def test_train_config_validation():
    with pytest.raises(InvalidParameter):
        TrainConfig.from_dict({"patch": 4})
    with pytest.raises(InvalidParameter):
        TrainConfig.from_dict({"learning_rate": 0.0})
    with pytest.raises(InvalidParameter):
        TrainConfig.from_dict({"precision": "real16"})


def test_adam_moves_against_gradient():
    params = init_params(OperatorConfig.from_dict(TINY))
    before = params.copy()
    grads = params.map(np.ones_like)
    AdamOptimizer(0.01).step(params, grads)
    for (name, a), (_, b) in zip(params.named_tensors(), before.named_tensors()):
        np.testing.assert_allclose(a, b - 0.01, atol=1e-9, err_msg=name)


def test_checkpoint_roundtrip(toy, tmp_path):
    dataset, art, _ = toy
    result = train(_train_config(epochs=1), dataset, OperatorConfig.from_dict(TINY), art)
    path = save_trained(tmp_path / "model.ckpt", result)
    params, metadata = load_trained(path)
    assert metadata["operator_config"]["hidden"] == 2
    assert len(metadata["train_grid_nm"]) == BANDS
    for (name, a), (_, b) in zip(params.named_tensors(), result.params.named_tensors()):
        np.testing.assert_array_equal(a, b, err_msg=name)


# ──────────────────────────────────────────
# プロトコル
# ──────────────────────────────────────────

def test_restrict_dataset_rebuilds_observation(toy):
    dataset = toy[0]
    restricted = restrict_dataset(dataset, range(0, BANDS, 2))
    for scene in restricted:
        assert scene.hsi.c_bands == BANDS // 2
        np.testing.assert_allclose(scene.msi.data, degrade(scene.srf, scene.hsi).data)


def test_continuous_protocol_evaluates_on_full_grid(toy):
    dataset, art, _ = toy
    result = protocol_continuous(dataset, 2, _train_config(epochs=1), OperatorConfig.from_dict(TINY), art, threads=1)
    assert result.train_grid.size == BANDS // 2
    assert result.eval_grid.size == BANDS
    assert all(np.isfinite(v) for v in result.metrics.to_dict().values())
    assert np.isfinite(result.baseline.psnr)
    with pytest.raises(InvalidParameter):
        protocol_continuous(dataset, BANDS, _train_config(epochs=1))


def test_zeroshot_protocol_trains_below_cutoff(toy):
    dataset, art, _ = toy
    result = protocol_zeroshot(dataset, 1400.0, _train_config(epochs=1), OperatorConfig.from_dict(TINY), art, threads=1)
    assert result.train_grid.max() < 1400.0
    assert result.eval_grid.max() == pytest.approx(2500.0)
    assert all(np.isfinite(v) for v in result.metrics.to_dict().values())
    with pytest.raises(InvalidParameter):
        protocol_zeroshot(dataset, 300.0)


def test_ablation_runs_all_configurations(toy):
    dataset, art, _ = toy
    results = protocol_ablation(dataset, _train_config(epochs=1), OperatorConfig.from_dict(TINY), art, threads=1)
    assert list(results) == ["full", "no_art_prior", "no_refinement", "neither"]
    assert results["no_refinement"].training.config.use_refinement is False
    assert results["neither"].training.config.use_art_prior is False
    for outcome in results.values():
        assert np.isfinite(outcome.metrics.psnr)


def test_single_band_cube_rejected_by_operator():
    params = init_params(OperatorConfig.from_dict(TINY))
    cube = HsiCube(grid=[500.0], data=np.zeros((1, 2, 2)))
    with pytest.raises(ShapeMismatch):
        stage2_reconstruct(cube, CoordinateGrid([500.0]), params)


def test_training_defaults_to_single_precision(toy):
    cfg = TrainConfig.from_dict()
    assert cfg.precision == "real32"
    assert cfg.recompute_activations
    dataset, art, _ = toy
    result = train(_train_config(epochs=1), dataset, OperatorConfig.from_dict(TINY), art)
    assert all(t.dtype == np.float32 for _, t in result.params.named_tensors())
    assert np.isfinite(result.curve[-1].train_loss)


def test_time_training_estimates_from_epoch():
    import experiments

    timing = experiments.time_training(
        scenes=2, size=8, bands=BANDS, target_epochs=50, measured_epochs=2, operator_overrides=TINY, budget_s=1e6
    )
    assert timing["timing.measured_epochs"] == 2
    assert 0 < timing["timing.epoch_s"] <= timing["timing.elapsed_s"]
    assert timing["timing.estimated_total_s"] == pytest.approx(50 * timing["timing.epoch_s"])
    assert timing["timing.within_budget"]
