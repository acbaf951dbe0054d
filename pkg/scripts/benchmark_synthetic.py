"""Train the desk-scale model on the standard synthetic city and compare with
the historical-average baseline on the full test range.

    python scripts/benchmark_synthetic.py [--config scripts/configs/synth_desk.yaml] [--out runs/desk]
"""

import argparse
import json
import logging
import time
from pathlib import Path

import yaml

from stsan.bundle import ingest
from stsan.config import load_run_config
from stsan.data import SamplingSpec
from stsan.evaluation import HistoricalAverage, evaluate
from stsan.model import StsanModel
from stsan.synthetic import GenSpec, generate_synthetic
from stsan.training import train

HERE = Path(__file__).parent


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=HERE / "configs" / "synth_desk.yaml")
    ap.add_argument("--gen", default=HERE / "configs" / "synth_gen.yaml")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--threshold", type=float, default=10.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg, _ = load_run_config(args.config)
    gen = GenSpec.from_dict(yaml.safe_load(Path(args.gen).read_text()))
    trips = generate_synthetic(gen)
    bundle = ingest(trips, cfg.dataset)
    sampling = SamplingSpec(cfg.dataset.days, cfg.dataset.per_day)
    splits = bundle.splits(sampling, cfg.model.block_size, cfg.dataset.val_fraction, cfg.dataset.seed)
    cfg.model.n_steps = sampling.n_steps
    cfg.model.intervals_per_day = bundle.grid.intervals_per_day
    cfg.train.checkpoint_dir = str(Path(args.out) / "checkpoints")
    print(f"{len(trips)} trips, {len(splits.train)} train / {len(splits.val)} val / {len(splits.test)} test samples")

    model = StsanModel(cfg.model)
    t0 = time.monotonic()
    res = train(model, splits, cfg.train)
    minutes = (time.monotonic() - t0) / 60

    stats = bundle.stats.flow
    ours = evaluate(model, splits.test, stats, threshold=args.threshold)
    ha = evaluate(HistoricalAverage(bundle.flows, bundle.train_intervals, stats), splits.test, stats,
                  threshold=args.threshold)
    summary = {"train_minutes": round(minutes, 1), "epochs": len(res.history), "stopped": res.stopped,
               "model": ours.to_dict(), "historical_average": ha.to_dict()}
    for ch in ("in", "out"):
        gain = 1 - ours.rmse(ch) / ha.rmse(ch)
        summary[f"rmse_gain_{ch}"] = gain
        print(f"{ch:>3}flow  RMSE {ours.rmse(ch):7.3f}  HA {ha.rmse(ch):7.3f}  gain {gain:6.1%}")
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
