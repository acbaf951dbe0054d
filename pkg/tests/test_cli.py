import json
import shutil

import numpy as np
import pytest
import yaml

from stsan import checkpoint
from stsan.bundle import Bundle
from stsan.cli import main
from stsan.config import TrainConfig, load_run_config
from stsan.data import SamplingSpec, TripTable, build_flow_tensor
from stsan.model import StsanModel
from stsan.training import AdamState, train_step


GEN = {"n_rows": 3, "n_cols": 3, "n_days": 10, "base_rate": 0.3, "seed": 1}
RUN = {
    "dataset": {"n_rows": 3, "n_cols": 3, "lat_min": 40.70, "lat_max": 40.85, "lon_min": -74.02,
                "lon_max": -73.87, "epoch": "2016-01-04T00:00:00", "days": 1, "per_day": 3, "train_days": 8},
    "model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "block_size": 3},
    "train": {"max_epochs": 1, "steps_per_epoch": 3, "batch_size": 16, "warmup_steps": 20, "val_max_samples": 40},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.yaml").write_text(yaml.safe_dump(GEN))
    (d / "run.yaml").write_text(yaml.safe_dump(RUN))
    assert main(["synth", str(d / "gen.yaml"), str(d / "trips.csv")]) == 0
    assert main(["ingest", str(d / "trips.csv"), str(d / "bundle"), "--config", str(d / "run.yaml")]) == 0
    assert main(["train", str(d / "bundle"), str(d / "ck"), "--config", str(d / "run.yaml"), "--seed", "3"]) == 0
    return d


def test_synth_zero_rate_header_only(tmp_path, capsys):
    (tmp_path / "g.yaml").write_text(yaml.safe_dump({**GEN, "base_rate": 0.0}))
    code, _, _ = run(capsys, "synth", tmp_path / "g.yaml", tmp_path / "t.csv")
    assert code == 0
    assert (tmp_path / "t.csv").read_text().strip().count("\n") == 0


def test_synth_byte_identical_under_seed(tmp_path, capsys):
    (tmp_path / "g.yaml").write_text(yaml.safe_dump(GEN))
    for name in ("a", "b"):
        assert run(capsys, "synth", tmp_path / "g.yaml", "--seed", 11, tmp_path / f"{name}.csv")[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synth_reported_count_matches_rows(tmp_path, capsys):
    (tmp_path / "g.yaml").write_text(yaml.safe_dump({"n_rows": 2, "n_cols": 2, "n_days": 2, "seed": 4}))
    code, out, _ = run(capsys, "synth", tmp_path / "g.yaml", tmp_path / "t.csv", "--json")
    assert code == 0
    assert json.loads(out)["trips"] == len(TripTable.read_csv(tmp_path / "t.csv")) > 0


def test_synth_unwritable_path(tmp_path, capsys):
    (tmp_path / "g.yaml").write_text(yaml.safe_dump(GEN))
    code, _, err = run(capsys, "synth", tmp_path / "g.yaml", tmp_path / "missing_dir" / "t.csv")
    assert code == 2 and "error" in err


def test_inspect_bundle_reports_grid(workdir, capsys):
    code, out, _ = run(capsys, "inspect", workdir / "bundle", "--json")
    info = json.loads(out)
    assert code == 0 and info["grid"] == [3, 3] and info["n_intervals"] == 480
    assert info["total_inflow"] == info["total_outflow"] == info["trips_read"]


def test_ingest_hand_counts(tmp_path, capsys, five_trips):
    TripTable.from_records(five_trips[:3]).write_csv(tmp_path / "t.csv")
    cfg = {"dataset": {"n_rows": 3, "n_cols": 3, "lat_min": 0.0, "lat_max": 3.0, "lon_min": 0.0, "lon_max": 3.0,
                       "epoch": "2016-01-04T00:00:00", "n_days": 2, "train_days": 1}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert run(capsys, "ingest", tmp_path / "t.csv", tmp_path / "b", "--config", tmp_path / "c.yaml")[0] == 0
    bundle = Bundle.load(tmp_path / "b")
    expected = build_flow_tensor(five_trips[:3], bundle.grid, 96).values
    np.testing.assert_array_equal(bundle.flows.values, expected)
    assert bundle.flows.values.sum() == 6


def test_ingest_malformed_timestamp(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text(
        "start_time,end_time,start_lat,start_lon,end_lat,end_lon\n"
        "2016-01-04T00:05:00,2016-01-04T00:20:00,40.75,-74.0,40.76,-73.95\n"
        "2016-01-04T00:05:00,2016-01-04T00:20:00,40.75,-74.0,40.76,-73.95\n"
        "yesterday,2016-01-04T00:20:00,40.75,-74.0,40.76,-73.95\n")
    code, _, err = run(capsys, "ingest", tmp_path / "bad.csv", tmp_path / "b")
    assert code == 3 and "line 4" in err


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "inspect", tmp_path, "--set", "oops")[0] == 1
    (tmp_path / "c.yaml").write_text("model: {no_such_key: 1}\n")
    assert run(capsys, "ingest", tmp_path / "x.csv", tmp_path / "b", "--config", tmp_path / "c.yaml")[0] == 1


def test_missing_files_are_io_errors(tmp_path, capsys):
    assert run(capsys, "ingest", tmp_path / "nope.csv", tmp_path / "b")[0] == 2
    assert run(capsys, "inspect", tmp_path / "nope.stsn")[0] == 2


def test_train_outputs(workdir):
    ck = workdir / "ck"
    assert (ck / "best.stsn").exists() and (ck / "best.stsn.json").exists() and (ck / "best.stsn.optim").exists()
    assert (ck / "metrics.csv").exists()
    cfg, _ = load_run_config(ck / "run.yaml")
    assert cfg.model.n_steps == 4 and cfg.model.seed == 3


def test_predict_nonnegative(workdir, capsys):
    code, out, _ = run(capsys, "predict", workdir / "bundle", workdir / "ck" / "best.stsn",
                       "--region", "0,2", "--interval", 400, "--json")
    pred = json.loads(out)
    assert code == 0 and pred["inflow"] >= 0 and pred["outflow"] >= 0
    code2, out2, _ = run(capsys, "predict", workdir / "bundle", workdir / "ck" / "best.stsn",
                         "--region", "0,2", "--interval", "2016-01-12T08:10:00", "--json")
    assert code2 == 0 and json.loads(out2)["interval"] == 400 and json.loads(out2)["inflow"] == pred["inflow"]


def test_predict_insufficient_history(workdir, capsys):
    code, _, err = run(capsys, "predict", workdir / "bundle", workdir / "ck" / "best.stsn",
                       "--region", "0,0", "--interval", 10)
    assert code == 3 and "history" in err


def test_explain_profile_sums_to_one(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "explain", workdir / "bundle", workdir / "ck" / "best.stsn", "--region", "1,1",
                       "--interval", 420, "--json", "--out-json", tmp_path / "e.json", "--out-csv", tmp_path / "e.csv")
    ex = json.loads(out)
    assert code == 0
    assert abs(sum(ex["profile"]) - 1) < 1e-4
    assert len(ex["history_intervals"]) == 4
    saved = json.loads((tmp_path / "e.json").read_text())
    assert saved["profile"] == ex["profile"]


def test_eval_reports_model_and_baseline(workdir, capsys):
    code, out, _ = run(capsys, "eval", workdir / "bundle", workdir / "ck" / "best.stsn", "--baseline", "--json")
    res = json.loads(out)
    assert code == 0 and res["split"] == "test"
    assert res["model"]["count_in"] == res["historical_average"]["count_in"] > 0


def test_eval_overfit_checkpoint_below_half_unit(workdir, tmp_path, capsys):
    bundle = Bundle.load(workdir / "bundle")
    cfg, _ = load_run_config(workdir / "ck" / "run.yaml")
    splits = bundle.splits(SamplingSpec(1, 3), 3, cfg.dataset.val_fraction, cfg.dataset.seed)
    batch = splits.dataset.batch(splits.train.keys[:32])
    cfg.model.dropout = 0.0
    model = StsanModel(cfg.model)
    state, tc = AdamState(), TrainConfig(warmup_steps=100, dropout=0.0)
    for _ in range(2000):
        if train_step(model, batch, state, tc)[0] < 2e-4:
            break
    ck = tmp_path / "ck"
    ck.mkdir()
    model.save(ck / "over.stsn")
    shutil.copy(workdir / "ck" / "run.yaml", ck / "run.yaml")
    code, out, _ = run(capsys, "eval", workdir / "bundle", ck / "over.stsn", "--split", "train", "--limit", 32,
                       "--threshold", 0, "--json")
    rep = json.loads(out)["model"]
    assert code == 0 and rep["count_in"] == 32
    assert rep["rmse_in"] < 0.5 and rep["rmse_out"] < 0.5


def test_divergence_exit_code(workdir, tmp_path, capsys):
    state = checkpoint.load(workdir / "ck" / "best.stsn")
    state = {k: np.full_like(v, np.nan) for k, v in state.items()}
    checkpoint.save(tmp_path / "nan.stsn", state)
    code, _, err = run(capsys, "train", workdir / "bundle", tmp_path / "out", "--config", workdir / "run.yaml",
                       "--resume", tmp_path / "nan.stsn")
    assert code == 4 and "divergence" in err


def test_conflicting_model_override(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "train", workdir / "bundle", tmp_path / "o", "--config", workdir / "run.yaml",
                       "--set", "model.n_steps=22")
    assert code == 1 and "n_steps" in err
