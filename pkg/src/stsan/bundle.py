"""On-disk dataset bundle: a JSON manifest plus raw little-endian arrays.

Layout of a bundle directory::

    manifest.json    format name, version, grid, horizon, split, stats, array index
    flows.f32        (I, J, T, 2) inflow/outflow counts
    trips.i64        (n, 4) start_cell, start_interval, end_cell, end_interval (-1 = dropped)
    external.f32     (T, z) raw external features, only when z > 0

Transition tensors are not stored; they are rebuilt from the discrete trips.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .config import DatasetConfig
from .data import (
    DataValidationError, DiscreteTrips, FlowTensor, GridSpec, NormStats, SamplingSpec, Splits,
    TransitionIndex, TripTable, build_flow_tensor, discretize, fit_stats, load_external_csv, make_dataset,
)

FORMAT = "stsan-bundle"
BUNDLE_VERSION = 1


class BundleError(ValueError):
    pass


def grid_from_config(cfg: DatasetConfig) -> GridSpec:
    return GridSpec(cfg.n_rows, cfg.n_cols, cfg.lat_min, cfg.lat_max, cfg.lon_min, cfg.lon_max,
                    cfg.interval_minutes, cfg.epoch_datetime)


@dataclass
class Bundle:
    grid: GridSpec
    flows: FlowTensor
    trips: DiscreteTrips
    train_intervals: int
    test_intervals: int | None
    stats: NormStats
    external: np.ndarray
    external_columns: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return self.flows.n_intervals

    def transitions(self) -> TransitionIndex:
        return TransitionIndex(self.trips, self.grid, self.n_intervals)

    def splits(self, sampling: SamplingSpec, block: int, val_fraction: float = 0.2, seed: int = 0) -> Splits:
        ext = self.external if self.external.shape[1] else None
        return make_dataset(self.flows, self.transitions(), sampling, block, self.train_intervals,
                            val_fraction, seed, ext, self.stats, self.test_intervals)

    def manifest(self) -> dict:
        g = self.grid
        T = self.n_intervals
        return {
            "format": FORMAT, "version": BUNDLE_VERSION,
            "grid": {"n_rows": g.n_rows, "n_cols": g.n_cols, "lat_min": g.lat_min, "lat_max": g.lat_max,
                     "lon_min": g.lon_min, "lon_max": g.lon_max, "interval_minutes": g.interval_minutes,
                     "epoch": g.epoch.isoformat()},
            "n_intervals": T,
            "train_intervals": self.train_intervals,
            "test_intervals": self.test_intervals,
            "external_columns": list(self.external_columns),
            "stats": self.stats.to_dict(),
            "info": self.info,
            "arrays": {
                "flows": {"file": "flows.f32", "dtype": "<f4", "shape": [g.n_rows, g.n_cols, T, 2]},
                "trips": {"file": "trips.i64", "dtype": "<i8", "shape": [len(self.trips), 4]},
                **({"external": {"file": "external.f32", "dtype": "<f4", "shape": list(self.external.shape)}}
                   if self.external.shape[1] else {}),
            },
        }

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        t = self.trips
        payload = {
            "flows": self.flows.values,
            "trips": np.stack([t.start_cell, t.start_interval, t.end_cell, t.end_interval], axis=1),
            "external": self.external,
        }
        for key, spec in man["arrays"].items():
            (out / spec["file"]).write_bytes(np.ascontiguousarray(payload[key], dtype=spec["dtype"]).tobytes())
        (out / "manifest.json").write_text(json.dumps(man, indent=2))
        return out

    @classmethod
    def load(cls, directory: str | Path) -> "Bundle":
        d = Path(directory)
        try:
            man = json.loads((d / "manifest.json").read_text())
        except json.JSONDecodeError as exc:
            raise BundleError(f"corrupt manifest: {exc}") from exc
        if man.get("format") != FORMAT:
            raise BundleError(f"{d} is not a dataset bundle")
        if man.get("version") != BUNDLE_VERSION:
            raise BundleError(f"unsupported bundle version {man.get('version')}")
        arrays = {}
        for key, spec in man["arrays"].items():
            blob = (d / spec["file"]).read_bytes()
            count = math.prod(spec["shape"])
            if len(blob) != count * np.dtype(spec["dtype"]).itemsize:
                raise BundleError(f"{spec['file']}: size does not match shape {spec['shape']}")
            arrays[key] = np.frombuffer(blob, dtype=spec["dtype"]).reshape(spec["shape"])
        g = man["grid"]
        grid = GridSpec(g["n_rows"], g["n_cols"], g["lat_min"], g["lat_max"], g["lon_min"], g["lon_max"],
                        g["interval_minutes"], datetime.fromisoformat(g["epoch"]))
        T = int(man["n_intervals"])
        trips = arrays["trips"].astype(np.int64)
        dt = DiscreteTrips(trips[:, 0].copy(), trips[:, 1].copy(), trips[:, 2].copy(), trips[:, 3].copy(), T)
        ext = arrays.get("external", np.zeros((T, 0))).astype(np.float64)
        return cls(grid, FlowTensor(arrays["flows"].astype(np.float64), grid), dt, int(man["train_intervals"]),
                   man["test_intervals"], NormStats.from_dict(man["stats"]), ext,
                   list(man["external_columns"]), man.get("info", {}))


def ingest(trips: TripTable, cfg: DatasetConfig, external_file: str | Path | None = None) -> Bundle:
    """Discretize a trip table onto the configured grid and fit train-range stats."""
    grid = grid_from_config(cfg)
    P = grid.intervals_per_day
    if cfg.n_days is not None:
        T = cfg.n_days * P
    else:
        last = max(grid.interval_of(trips.start_time).max(initial=-1), grid.interval_of(trips.end_time).max(initial=-1))
        T = int(math.ceil((last + 1) / P)) * P
    train_T = cfg.train_days * P
    test_T = cfg.test_days * P if cfg.test_days is not None else None
    if T <= train_T:
        raise DataValidationError(f"horizon of {T // P} days leaves nothing after {cfg.train_days} training days")
    dt = discretize(trips, grid, T)
    flows = build_flow_tensor(dt, grid)
    ext_path = external_file or cfg.external_file
    external = np.zeros((T, 0))
    if ext_path is not None:
        external = load_external_csv(ext_path, cfg.external_columns, grid, T)
    stats = fit_stats(flows, TransitionIndex(dt, grid), train_T, external if external.shape[1] else None)
    kept = int(np.sum(dt.start_ok | dt.end_ok))
    info = {"trips_read": len(trips), "trips_kept": kept, "trips_dropped": len(trips) - kept}
    return Bundle(grid, flows, dt, train_T, test_T, stats, external, list(cfg.external_columns), info)
