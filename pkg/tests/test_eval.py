import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volsurf.errors import ModelKindError, NoMissingPointsError
from volsurf.eval import (
    DEFAULT_FRACTIONS,
    LambdaRow,
    draw_eval_masks,
    evaluate,
    evaluate_model,
    lambda_sweep,
    moneyness_region,
    regional,
    sparsity_sweep,
    tenor_region,
    attention_export,
    write_table,
)
from volsurf.nn.models import ModelConfig, build_model
from volsurf.nn.train import TrainConfig
from volsurf.surface import build_input, random_mask, wing_mask

from conftest import smooth_dataset

TINY_TF = ModelConfig("transformer", d_model=16, enc_layers=1, dec_layers=1, heads=2, d_ff=32)


class Flat:
    """Predicts the mean of the observed values everywhere."""

    def predict(self, x):
        v, m = x[:, 0], x[:, 1]
        level = (v * m).sum(axis=(1, 2)) / np.maximum(m.sum(axis=(1, 2)), 1)
        return np.broadcast_to(level[:, None, None], v.shape).copy()


def surface(grid, seed=0):
    return smooth_dataset(1, seed, grid).iv[0]


def test_exact_prediction_scores_zero(grid):
    iv = surface(grid)
    m = random_mask(0.3, np.random.default_rng(0))
    r = evaluate(iv, iv, m, grid)
    assert r.rmse_miss == r.rmse_obs == r.mae == r.max_err == 0


def test_constant_offset(grid):
    iv = surface(grid)
    r = evaluate(iv + 0.01, iv, random_mask(0.5, np.random.default_rng(1)), grid)
    for v in (r.rmse_miss, r.rmse_obs, r.mae, r.max_err):
        assert v == pytest.approx(0.01, rel=1e-12)


def test_single_missing_point(grid):
    iv = surface(grid)
    m = np.ones(grid.shape)
    m[3, 12] = 0
    pred = iv.copy()
    pred[3, 12] += 0.02
    pred[0, 0] -= 0.5  # observed errors do not enter rmse_miss
    r = evaluate(pred, iv, m, grid)
    assert r.rmse_miss == pytest.approx(0.02, rel=1e-12)
    assert r.max_err == pytest.approx(0.5) and r.max_err >= r.mae


def test_invalid_truth_excluded(grid):
    iv = surface(grid)
    m = np.ones(grid.shape)
    m[:, :3] = 0
    valid = np.ones(grid.shape)
    valid[:, :2] = 0
    pred = iv + np.where(valid > 0, 0.0, 9.0)
    pred[:, 2] += 0.01
    r = evaluate(pred, iv, m, grid, target_mask=valid)
    assert r.rmse_miss == pytest.approx(0.01) and r.max_err == pytest.approx(0.01)


def test_no_missing_points_raises(grid):
    iv = surface(grid)
    with pytest.raises(NoMissingPointsError):
        evaluate(iv, iv, np.ones(grid.shape), grid)
    m = np.ones(grid.shape)
    m[0, 0] = 0
    valid = np.ones(grid.shape)
    valid[0, 0] = 0
    with pytest.raises(NoMissingPointsError):
        evaluate(iv, iv, m, grid, target_mask=valid)
    assert evaluate(iv, iv, np.ones(grid.shape), grid, allow_no_missing=True).rmse_miss is None


def test_arbitrage_stats_from_prediction(grid):
    iv = surface(grid)
    m = random_mask(0.3, np.random.default_rng(2))
    clean = evaluate(iv, iv, m, grid)
    assert clean.butterfly.rate == 0 and clean.calendar.rate == 0
    pred = iv.copy()
    pred[4, 12] += 0.05
    r = evaluate(pred, iv, m, grid)
    assert r.butterfly.count_violating == 1 and r.expected_severity > 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_error_metrics_permutation_invariant(grid, seed):
    rng = np.random.default_rng(seed)
    iv = surface(grid, seed % 1000)
    pred = iv + rng.normal(scale=0.01, size=grid.shape)
    m = random_mask(0.4, rng)
    rows, cols = rng.permutation(8), rng.permutation(25)
    a = evaluate(pred, iv, m, grid, allow_no_missing=True)
    b = evaluate(pred[rows][:, cols], iv[rows][:, cols], m[rows][:, cols], grid, allow_no_missing=True)
    for name in ("rmse_miss", "rmse_obs", "mae", "max_err"):
        x, y = getattr(a, name), getattr(b, name)
        assert (x is None and y is None) or x == pytest.approx(y, rel=1e-13)


def test_region_boundaries(grid):
    assert moneyness_region(np.log(70 / 100)) == 0
    assert moneyness_region(-0.2) == 1 and moneyness_region(-0.05) == 2
    assert moneyness_region(0.0) == 2 and moneyness_region(0.05) == 2
    assert moneyness_region(0.2) == 3 and moneyness_region(0.2000001) == 4
    assert [tenor_region(t) for t in grid.tenors] == [0, 0, 0, 1, 1, 1, 2, 2]


def test_regional_empty_cells_absent(grid):
    iv = surface(grid)
    m = np.ones(grid.shape)
    m[0, 12] = 0
    r = regional(iv + 0.03, iv, m, grid)
    assert r.rmse[2][0] == pytest.approx(0.03)
    assert sum(c for row in r.counts for c in row) == 1
    assert sum(v is None for row in r.rmse for v in row) == 14
    assert len(r.to_rows()) == 15


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.floats(0.05, 0.95))
def test_regional_recombines_to_global(grid, seed, p):
    rng = np.random.default_rng(seed)
    iv = surface(grid, seed % 1000)
    pred = iv + rng.normal(scale=0.02, size=grid.shape)
    m = random_mask(p, rng)
    if m.all():
        m[0, 0] = 0
    r = regional(pred, iv, m, grid)
    assert abs(r.recombined() - evaluate(pred, iv, m, grid).rmse_miss) < 1e-12


def test_sweep_rows_and_reproducibility(grid):
    ds = smooth_dataset(6, 0, grid)
    rows = sparsity_sweep(Flat(), ds)
    assert [r.p for r in rows] == list(DEFAULT_FRACTIONS) and len(rows) == 9
    again = sparsity_sweep(Flat(), ds)
    assert [r.to_dict() for r in rows] == [r.to_dict() for r in again]
    other = sparsity_sweep(Flat(), ds, seed=1)
    assert [r.to_dict() for r in rows] != [r.to_dict() for r in other]


def test_sweep_zero_fraction_has_no_missing_metric(grid):
    (row,) = sparsity_sweep(Flat(), smooth_dataset(3, 0, grid), fractions=[0.0])
    assert row.metrics.rmse_miss is None and row.metrics.rmse_obs is not None


def test_wing_mode(grid):
    ds = smooth_dataset(4, 1, grid)
    masks = draw_eval_masks(ds, 0.3, 0, "wing+random")
    wing = wing_mask(grid) == 0
    assert wing.sum() >= 16
    assert np.all(masks[:, wing] == 0)
    assert all((m == 0).sum() >= 16 for m in masks)
    (row,) = sparsity_sweep(Flat(), ds, fractions=[0.3], mode="wing+random")
    assert row.structural_missing == wing.sum() and row.mode == "wing+random"
    with pytest.raises(ValueError):
        draw_eval_masks(ds, 0.3, 0, "stripes")


def test_evaluate_model_averages_per_surface(grid):
    ds = smooth_dataset(5, 2, grid)
    agg, per, preds = evaluate_model(Flat(), ds, p=0.5, seed=3)
    assert preds.shape == (5, 8, 25) and len(per) == 5
    assert agg.rmse_miss == pytest.approx(np.mean([m.rmse_miss for m in per]), rel=1e-14)
    assert agg.max_err == max(m.max_err for m in per)


class _Report:
    def __init__(self, model):
        self.model = model


def test_lambda_sweep_orders_and_records_failures(grid):
    ds = smooth_dataset(4, 3, grid)
    calls = []

    def trainer(cfg, tcfg, train_set, val_set):
        calls.append((tcfg.lambda_but, tcfg.seed))
        if tcfg.lambda_but == 0.5 and tcfg.seed == 1:
            raise FloatingPointError("diverged")
        return _Report(Flat())

    rows = lambda_sweep(ModelConfig("mlp"), TrainConfig.for_model("mlp"), [1.0, 0.0, 0.5], [0, 1],
                        ds, ds, ds, trainer=trainer)
    assert [r.lam for r in rows] == [0.0, 0.5, 1.0]
    assert len(calls) == 6
    assert [r.n_ok for r in rows] == [2, 1, 2]
    assert "FloatingPointError" in rows[1].to_dict()["errors"][0]
    assert isinstance(rows[0], LambdaRow) and rows[0].rmse_miss == rows[2].rmse_miss
    with pytest.raises(ValueError):
        lambda_sweep(ModelConfig("mlp"), TrainConfig.for_model("mlp"), [], [0], ds, ds, ds, trainer=trainer)


def test_attention_export_rows(grid):
    model = build_model(TINY_TF, grid, seed=0)
    iv = surface(grid)
    m = random_mask(0.4, np.random.default_rng(5))
    w = attention_export(model, build_input(iv, m), [0, 17, 199])
    assert w.shape == (1, 2, 3, 200)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(w[..., m.reshape(-1) == 0] == 0)
    full = attention_export(model, build_input(iv, np.ones(grid.shape)), [5])
    assert np.all(full > 0)


def test_attention_export_errors(grid):
    x = build_input(surface(grid), np.ones(grid.shape))
    with pytest.raises(ModelKindError):
        attention_export(build_model(ModelConfig("mlp"), grid), x, [0])
    model = build_model(TINY_TF, grid)
    with pytest.raises(IndexError):
        attention_export(model, x, [200])
    with pytest.raises(ValueError):
        attention_export(model, np.stack([x, x]), [0])


def test_write_table(tmp_path):
    rows = [{"p": 0.1, "rmse_miss": None, "x": float("nan")}, {"p": 0.2, "rmse_miss": np.float64(0.5), "x": 1.0}]
    write_table(rows, tmp_path / "t.csv", tmp_path / "t.json", meta={"model": "svi"})
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["p,rmse_miss,x", "0.1,,", "0.2,0.5,1.0"]
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["meta"] == {"model": "svi"} and doc["rows"][0]["x"] is None
