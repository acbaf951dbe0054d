import json
import math

import numpy as np
import pytest

from stsan.data import MinMaxStats, tailor
from stsan.evaluation import (
    Explanation, HistoricalAverage, aggregate_profile, denormalize, evaluate, extract_explanation,
    read_slice_csv, rmse_mae, write_slice_csv,
)
from stsan.model import StsanModel

from helpers import tiny_model_cfg, tiny_splits


def test_metric_worked_fixture():
    preds = [[10.0, 12.0], [15.0, 18.0]]
    truths = [[12.0, 10.0], [11.0, 14.0]]
    rep = rmse_mae(preds, truths, threshold=10.0)
    assert rep.mae_in == 3.0 and rep.mae_out == 3.0
    assert rep.rmse_in == pytest.approx(math.sqrt(10), abs=1e-12)
    assert rep.rmse_out == pytest.approx(math.sqrt(10), abs=1e-12)


def test_single_channel_fixture():
    rep = rmse_mae([[10.0], [24.0], [50.0]], [[12.0], [20.0], [9.0]], threshold=10.0)
    assert rep.count_in == 2 and rep.count_out == 0
    assert abs(rep.mae_in - 3.0) < 1e-9 and abs(rep.rmse_in - math.sqrt(10)) < 1e-9
    assert rep.rmse_out is None


def test_threshold_drops_small_truths():
    preds = [[10.0, 12.0], [15.0, 18.0], [100.0, 100.0]]
    truths = [[12.0, 10.0], [11.0, 14.0], [9.0, 9.99]]
    rep = rmse_mae(preds, truths, threshold=10.0)
    assert rep.count_in == 2 and rep.count_out == 2
    assert rep.mae_in == 3.0


def test_per_channel_vs_joint_filter():
    preds = [[0.0, 0.0], [0.0, 0.0]]
    truths = [[20.0, 5.0], [30.0, 40.0]]
    per = rmse_mae(preds, truths, 10.0, "per_channel")
    joint = rmse_mae(preds, truths, 10.0, "joint")
    assert (per.count_in, per.count_out) == (2, 1)
    assert (joint.count_in, joint.count_out) == (1, 1)
    assert joint.mae_in == 30.0


def test_empty_filter_is_reported_not_zero():
    rep = rmse_mae([[1.0, 1.0]], [[2.0, 3.0]], threshold=10.0)
    assert rep.rmse_in is None and rep.count_in == 0
    d = json.loads(rep.to_json())
    assert d["rmse_in"] == "no samples" and d["mae_out"] == "no samples"
    assert rep.score() == math.inf


def test_metrics_are_permutation_invariant():
    rng = np.random.default_rng(0)
    p, t = rng.random((50, 2)) * 40, rng.random((50, 2)) * 40
    perm = rng.permutation(50)
    a, b = rmse_mae(p, t), rmse_mae(p[perm], t[perm])
    assert a.rmse_in == b.rmse_in and a.mae_out == b.mae_out


def test_denormalize_examples():
    s = MinMaxStats(0.0, 200.0)
    np.testing.assert_allclose(denormalize([0.5, 1.0, 0.0], s), [100.0, 200.0, 0.0])
    assert denormalize([-0.2], s)[0] == 0.0


@pytest.fixture(scope="module")
def splits():
    return tiny_splits(n_days=5, train_days=4)


def test_historical_average_is_time_of_day_mean(splits):
    ds = splits.dataset
    train_end = 4 * 48
    ha = HistoricalAverage(ds.flows, train_end, ds.stats.flow)
    batch = splits.test.subset(np.arange(5)).dataset.batch(splits.test.keys[:5])
    raw = ds.stats.flow.invert(ha.predict(batch))
    for k in range(5):
        i, j = batch.focal[k]
        tod = batch.t_pred[k] % 48
        expected = ds.flows.values[i, j, tod:train_end:48].mean(axis=0)
        np.testing.assert_allclose(raw[k], expected, atol=1e-9)


def test_evaluate_writes_breakdown(tmp_path, splits):
    ds = splits.dataset
    ha = HistoricalAverage(ds.flows, 4 * 48, ds.stats.flow)
    rep = evaluate(ha, splits.test, ds.stats.flow, threshold=0.0, breakdown_csv=tmp_path / "b.csv")
    assert rep.notes["n_samples"] == len(splits.test)
    lines = (tmp_path / "b.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 9


def test_aggregate_profile_sums_to_one():
    rng = np.random.default_rng(0)
    recs = []
    for _ in range(3):
        w = rng.random((3, 3, 2, 1, 6))
        recs.append(w / w.sum(-1, keepdims=True))
    profile, per_layer, per_head = aggregate_profile(recs)
    assert profile.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(per_layer.sum(-1), 1.0, atol=1e-12)
    assert per_head.shape == (3, 2, 6)


@pytest.fixture(scope="module")
def explained(splits):
    model = StsanModel(tiny_model_cfg(n_layers=2))
    ds = splits.dataset
    batch = ds.batch(splits.test.keys[:3])
    return model, batch, extract_explanation(model, batch, ds.stats.transition, ds.stats.flow, k=1)


def test_explanation_profile_and_slice(splits, explained):
    model, batch, ex = explained
    ds = splits.dataset
    assert ex.profile.shape == (4,) and ex.per_layer.shape == (2, 4) and ex.per_head.shape == (2, 2, 4)
    assert ex.profile.sum() == pytest.approx(1.0, abs=1e-6)
    assert (ex.profile >= 0).all()
    focal, t = ex.focal, ex.t_pred
    raw = tailor(ds.transitions.tensor(focal).values[:, :, t - 1], focal, 3)
    np.testing.assert_allclose(ex.transition_slice, raw, atol=1e-4 * max(1.0, ds.stats.transition.hi))
    np.testing.assert_allclose(ex.prediction, denormalize(model.predict(batch)[1], ds.stats.flow), atol=1e-9)


def test_explanation_export_round_trip(tmp_path, explained):
    _, _, ex = explained
    ex.export(tmp_path / "e.json", tmp_path / "e.csv")
    back = Explanation.load(tmp_path / "e.json")
    np.testing.assert_array_equal(back.profile, ex.profile)
    np.testing.assert_array_equal(back.transition_slice, ex.transition_slice)
    np.testing.assert_array_equal(read_slice_csv(tmp_path / "e.csv"), ex.transition_slice)


def test_slice_csv_exact(tmp_path):
    v = np.random.default_rng(3).random((3, 3, 2)) * 1e3
    write_slice_csv(tmp_path / "s.csv", v)
    np.testing.assert_array_equal(read_slice_csv(tmp_path / "s.csv"), v)


def test_explanation_recomputes_from_checkpoint(tmp_path, splits, explained):
    model, batch, ex = explained
    model.save(tmp_path / "m.stsn")
    ds = splits.dataset
    again = extract_explanation(StsanModel.load(tmp_path / "m.stsn"), batch, ds.stats.transition, ds.stats.flow, k=1)
    np.testing.assert_allclose(again.profile, ex.profile, atol=1e-6)
    np.testing.assert_array_equal(again.transition_slice, ex.transition_slice)
