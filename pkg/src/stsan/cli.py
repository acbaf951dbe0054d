"""``stsan`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 data validation error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint
from . import engine as E
from .bundle import Bundle, BundleError, ingest
from .checkpoint import MAGIC, CheckpointError
from .config import RunConfig, dump_yaml, load_run_config, model_config_from_dict, to_dict
from .data import DataValidationError, InsufficientHistory, SamplingSpec, TripTable, sample_history
from .evaluation import (
    HistoricalAverage, denormalize, evaluate, extract_explanation, heat_table, write_slice_csv,
)
from .model import StsanModel
from .synthetic import GenSpec, generate_synthetic
from .training import DivergenceError, train

log = logging.getLogger("stsan")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------

def _parse_sets(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def _run_config(args, extra: dict | None = None) -> tuple[RunConfig, dict]:
    overrides = _parse_sets(getattr(args, "set", None))
    overrides.update(extra or {})
    if args.seed is not None:
        for key in ("dataset.seed", "model.seed", "train.seed"):
            overrides.setdefault(key, args.seed)
    try:
        return load_run_config(getattr(args, "config", None), overrides)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _banner(args, cfg: RunConfig | None = None, origin: dict | None = None) -> None:
    parts = [f"stsan {__version__} {args.command}", f"seed={args.seed}", f"threads={args.threads}"]
    print(" | ".join(parts), file=sys.stderr)
    if cfg is not None:
        flat = {f"{s}.{k}": v for s, sec in to_dict(cfg).items() for k, v in sec.items()}
        for key, value in flat.items():
            src = (origin or {}).get(key, "default")
            if src != "default":
                print(f"  {key} = {value!r}  [{src}]", file=sys.stderr)


def _emit(args, payload: dict, human: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=_jsonable))
    else:
        if human is None:
            width = max((len(k) for k in payload), default=0)
            human = "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in payload.items())
        print(human)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (Path, datetime)):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v)}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple, np.ndarray)):
        arr = np.asarray(v)
        if arr.dtype.kind == "f":
            return "[" + ", ".join(f"{x:.4f}" for x in arr.ravel()) + "]"
    return str(v)


def _sampling(cfg: RunConfig) -> SamplingSpec:
    return SamplingSpec(cfg.dataset.days, cfg.dataset.per_day)


def _load_model(path: str) -> StsanModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return StsanModel.load(path)


def _checkpoint_run_config(args, ckpt: str) -> RunConfig:
    """Prefer an explicit --config; otherwise the run.yaml written next to the checkpoint."""
    if getattr(args, "config", None) is None:
        saved = Path(ckpt).parent / "run.yaml"
        if saved.exists():
            args.config = str(saved)
    cfg, _ = _run_config(args)
    return cfg


def _model_splits(bundle: Bundle, model: StsanModel, cfg: RunConfig):
    sampling = _sampling(cfg)
    if sampling.n_steps != model.cfg.n_steps:
        raise UsageError(f"history sampling gives {sampling.n_steps} steps but the model expects {model.cfg.n_steps}")
    return bundle.splits(sampling, model.cfg.block_size, cfg.dataset.val_fraction, cfg.dataset.seed)


def _resolve_interval(bundle: Bundle, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        when = datetime.fromisoformat(text)
    except ValueError as exc:
        raise UsageError(f"--interval must be an index or ISO timestamp, got {text!r}") from exc
    return int(bundle.grid.interval_of(np.array([when], dtype="datetime64[s]"))[0])


def _resolve_region(bundle: Bundle, text: str) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--region expects ROW,COL, got {text!r}") from exc
    bundle.grid.region_index(i, j)
    return i, j


def _single(bundle: Bundle, model: StsanModel, cfg: RunConfig, region, t: int):
    splits = _model_splits(bundle, model, cfg)
    ds = splits.dataset
    if not 0 <= t < ds.n_intervals:
        raise DataValidationError(f"interval {t} outside the bundle horizon [0, {ds.n_intervals})")
    if t < ds.first_predictable():
        raise InsufficientHistory(f"interval {t} needs history back to {t - ds.first_predictable()}; "
                                  f"first predictable interval is {ds.first_predictable()}")
    n = bundle.grid.region_index(*region)
    return ds, ds.batch(np.array([[n, t]]))


# -- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = GenSpec.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad generator spec: {exc}") from exc
    _banner(args)
    trips = generate_synthetic(spec)
    trips.write_csv(args.out)
    _emit(args, {"trips": len(trips), "path": str(args.out), "grid": [spec.n_rows, spec.n_cols],
                 "days": spec.n_days, "seed": spec.seed})
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg, origin = _run_config(args)
    _banner(args, cfg, origin)
    trips = TripTable.read_csv(args.trips)
    bundle = ingest(trips, cfg.dataset, args.external)
    bundle.save(args.out)
    _emit(args, _bundle_summary(bundle, args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, origin = _run_config(args)
    bundle = Bundle.load(args.bundle)
    sampling = _sampling(cfg)
    derived = {"n_steps": sampling.n_steps, "intervals_per_day": bundle.grid.intervals_per_day,
               "n_external": bundle.external.shape[1]}
    for key, value in derived.items():
        given = getattr(cfg.model, key)
        if origin.get(f"model.{key}", "default") != "default" and given != value:
            raise UsageError(f"model.{key}={given} conflicts with the data ({value})")
        setattr(cfg.model, key, value)
        origin.setdefault(f"model.{key}", "bundle")
    cfg.train.checkpoint_dir = str(args.out)
    origin["train.checkpoint_dir"] = "flag"
    _banner(args, cfg, origin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_yaml(cfg, out / "run.yaml")
    splits = bundle.splits(sampling, cfg.model.block_size, cfg.dataset.val_fraction, cfg.dataset.seed)
    model = StsanModel(cfg.model)
    log.info("model has %d parameters; %d train / %d val samples", model.num_parameters(),
             len(splits.train), len(splits.val))
    res = train(model, splits, cfg.train, resume_from=args.resume)
    payload = {"best_checkpoint": str(out / "best.stsn"), "epoch_checkpoint": str(res.best_path),
               "best_val_score": res.best_score, "epochs": len(res.history), "steps": res.steps,
               "stopped": res.stopped, "parameters": model.num_parameters(),
               "val": res.best_report.to_dict() if res.best_report else None}
    _emit(args, payload)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _checkpoint_run_config(args, args.checkpoint)
    _banner(args, cfg)
    bundle = Bundle.load(args.bundle)
    model = _load_model(args.checkpoint)
    splits = _model_splits(bundle, model, cfg)
    samples = getattr(splits, args.split)
    if args.limit is not None:
        samples = samples.subset(np.arange(min(args.limit, len(samples))))
    stats = splits.dataset.stats.flow
    report = evaluate(model, samples, stats, args.threshold, filter_mode=args.filter_mode,
                      breakdown_csv=args.breakdown)
    payload = {"split": args.split, "model": report.to_dict()}
    if args.baseline:
        ha = HistoricalAverage(bundle.flows, bundle.train_intervals, stats)
        payload["historical_average"] = evaluate(ha, samples, stats, args.threshold,
                                                 filter_mode=args.filter_mode).to_dict()
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(payload, indent=2))
    if args.json:
        _emit(args, payload)
    else:
        cols = ("rmse_in", "mae_in", "rmse_out", "mae_out", "count_in", "count_out")
        rows = [("predictor",) + cols]
        rows += [(name,) + tuple(_fmt(rep[c]) for c in cols) for name, rep in payload.items() if name != "split"]
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        print("\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _checkpoint_run_config(args, args.checkpoint)
    _banner(args, cfg)
    bundle = Bundle.load(args.bundle)
    model = _load_model(args.checkpoint)
    region = _resolve_region(bundle, args.region)
    t = _resolve_interval(bundle, args.interval)
    ds, batch = _single(bundle, model, cfg, region, t)
    pred = denormalize(model.predict(batch)[0].astype(np.float64), ds.stats.flow)
    payload = {"region": list(region), "interval": t, "interval_start": bundle.grid.interval_start(t).isoformat(),
               "inflow": float(pred[0]), "outflow": float(pred[1]),
               "observed": batch.target_raw[0].tolist()}
    _emit(args, payload)
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _checkpoint_run_config(args, args.checkpoint)
    _banner(args, cfg)
    bundle = Bundle.load(args.bundle)
    model = _load_model(args.checkpoint)
    region = _resolve_region(bundle, args.region)
    t = _resolve_interval(bundle, args.interval)
    ds, batch = _single(bundle, model, cfg, region, t)
    ex = extract_explanation(model, batch, ds.stats.transition, ds.stats.flow)
    if args.out_json:
        ex.export(args.out_json, args.out_csv)
    elif args.out_csv:
        write_slice_csv(args.out_csv, ex.transition_slice)
    hist = sample_history(t, ds.sampling, bundle.grid.intervals_per_day)
    payload = ex.to_dict()
    payload["history_intervals"] = hist
    if args.json:
        _emit(args, payload)
    else:
        lines = [f"region {region} interval {t} ({bundle.grid.interval_start(t):%Y-%m-%d %H:%M})",
                 f"prediction in/out: {ex.prediction[0]:.2f} / {ex.prediction[1]:.2f}",
                 "temporal attention (history interval, weight):"]
        lines += [f"  {h:>6d}  {bundle.grid.interval_start(h):%a %H:%M}  {w:.4f}" for h, w in zip(hist, ex.profile)]
        lines.append("transition slice at t-1, inflow channel:")
        lines.append(heat_table(ex.transition_slice[:, :, 0]))
        print("\n".join(lines))
    return EXIT_OK


def _bundle_summary(bundle: Bundle, path) -> dict:
    g = bundle.grid
    v = bundle.flows.values
    return {"kind": "bundle", "path": str(path), "grid": [g.n_rows, g.n_cols],
            "interval_minutes": g.interval_minutes, "n_intervals": bundle.n_intervals,
            "days": bundle.n_intervals // g.intervals_per_day, "epoch": g.epoch.isoformat(),
            "train_intervals": bundle.train_intervals, "test_intervals": bundle.test_intervals,
            "total_inflow": float(v[..., 0].sum()), "total_outflow": float(v[..., 1].sum()),
            "mean_flow": float(v.mean()), "external_columns": bundle.external_columns,
            "stats": bundle.stats.to_dict(), **bundle.info}


def cmd_inspect(args) -> int:
    _banner(args)
    path = Path(args.path)
    if path.is_dir():
        _emit(args, _bundle_summary(Bundle.load(path), path))
        return EXIT_OK
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != MAGIC:
        raise DataValidationError(f"{path} is neither a dataset bundle nor a checkpoint")
    arrays = checkpoint.load(path)
    payload = {"kind": "checkpoint", "path": str(path), "tensors": len(arrays),
               "parameters": int(sum(a.size for a in arrays.values()))}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        payload["model"] = to_dict(model_config_from_dict(json.loads(sidecar.read_text())))
    _emit(args, payload)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="BLAS thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    cfgp = _Parser(add_help=False)
    cfgp.add_argument("--config", help="run config YAML (dataset/model/train sections)")
    cfgp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    p = _Parser(prog="stsan", description="Grid crowd-flow prediction with a spatial-temporal self-attention network.")
    p.add_argument("--version", action="version", version=f"stsan {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic trip CSV")
    s.add_argument("spec", help="generator spec YAML (GenSpec fields); an empty file means defaults")
    s.add_argument("out", help="output trip CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common, cfgp], help="discretize trips into a dataset bundle")
    s.add_argument("trips", help="trip CSV")
    s.add_argument("out", help="bundle directory to create")
    s.add_argument("--external", help="external feature CSV (time column plus dataset.external_columns)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common, cfgp], help="train a model on a bundle")
    s.add_argument("bundle")
    s.add_argument("out", help="checkpoint directory")
    s.add_argument("--resume", help="checkpoint to resume from (restores optimizer state if present)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, cfgp], help="filtered RMSE/MAE on a split")
    s.add_argument("bundle")
    s.add_argument("checkpoint")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--threshold", type=float, default=10.0)
    s.add_argument("--filter-mode", choices=("per_channel", "joint"), default="per_channel")
    s.add_argument("--limit", type=int, help="evaluate only the first N samples of the split")
    s.add_argument("--baseline", action="store_true", help="also score the historical-average baseline")
    s.add_argument("--breakdown", help="per-region CSV output")
    s.add_argument("--out-json", help="write the metrics JSON here as well")
    s.set_defaults(func=cmd_eval)

    for name, fn, text in (("predict", cmd_predict, "predict inflow/outflow for one region and interval"),
                           ("explain", cmd_explain, "attention profile and transition slice for one prediction")):
        s = sub.add_parser(name, parents=[common, cfgp], help=text)
        s.add_argument("bundle")
        s.add_argument("checkpoint")
        s.add_argument("--region", required=True, help="ROW,COL")
        s.add_argument("--interval", required=True, help="interval index or ISO timestamp")
        if name == "explain":
            s.add_argument("--out-json")
            s.add_argument("--out-csv", help="transition slice CSV")
        s.set_defaults(func=fn)

    s = sub.add_parser("inspect", parents=[common], help="summarize a bundle or checkpoint")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, E.NonFiniteError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataValidationError as exc:
        where = f" (line {exc.line})" if exc.line is not None else ""
        print(f"error: invalid data{where}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InsufficientHistory, E.ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
