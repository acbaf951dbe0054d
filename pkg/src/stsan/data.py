"""Trip records -> grid flow / transition histories -> model samples."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TRIP_COLUMNS = ("start_time", "end_time", "start_lat", "start_lon", "end_lat", "end_lon")


class DataValidationError(ValueError):
    """Bad input data; ``line`` is the 1-based file line when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n_rows: int
    n_cols: int
    lat_min: float = 0.0
    lat_max: float = 1.0
    lon_min: float = 0.0
    lon_max: float = 1.0
    interval_minutes: int = 30
    epoch: datetime = datetime(2016, 1, 4)  # a Monday

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if self.interval_minutes <= 0 or 1440 % self.interval_minutes:
            raise ValueError("interval_minutes must divide 1440")
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError("degenerate bounding box")

    @property
    def intervals_per_day(self) -> int:
        return 1440 // self.interval_minutes

    @property
    def n_regions(self) -> int:
        return self.n_rows * self.n_cols

    def region_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.n_rows and 0 <= j < self.n_cols):
            raise ValueError(f"region ({i}, {j}) outside {self.n_rows}x{self.n_cols} grid")
        return i * self.n_cols + j

    def region_coords(self, n: int) -> tuple[int, int]:
        if not 0 <= n < self.n_regions:
            raise ValueError(f"region index {n} outside grid")
        return divmod(n, self.n_cols)

    def locate(self, lat, lon) -> np.ndarray:
        """Flat region index per point; -1 for points outside the bounding box."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = (lat >= self.lat_min) & (lat <= self.lat_max) & (lon >= self.lon_min) & (lon <= self.lon_max)
        r = np.floor((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.n_rows)
        c = np.floor((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.n_cols)
        r = np.clip(np.nan_to_num(r), 0, self.n_rows - 1).astype(np.int64)
        c = np.clip(np.nan_to_num(c), 0, self.n_cols - 1).astype(np.int64)
        return np.where(inside, r * self.n_cols + c, -1)

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        h = (self.lat_max - self.lat_min) / self.n_rows
        w = (self.lon_max - self.lon_min) / self.n_cols
        return self.lat_min + (i + 0.5) * h, self.lon_min + (j + 0.5) * w

    def interval_of(self, times) -> np.ndarray:
        """Interval index (floor) of each timestamp relative to ``epoch``."""
        t = np.asarray(times, dtype="datetime64[s]")
        secs = (t - np.datetime64(self.epoch, "s")).astype(np.int64)
        return np.floor_divide(secs, self.interval_minutes * 60)

    def interval_start(self, t: int) -> datetime:
        return (np.datetime64(self.epoch, "s") + np.timedelta64(int(t) * self.interval_minutes * 60, "s")).astype(datetime)

    def descriptors(self, intervals) -> tuple[np.ndarray, np.ndarray]:
        """(day-of-week with Monday=0, time-of-day slot) for interval indices."""
        t = np.asarray(intervals, dtype=np.int64)
        e = self.epoch
        offset = (e.hour * 60 + e.minute) // self.interval_minutes
        absolute = t + offset
        tod = np.mod(absolute, self.intervals_per_day)
        dow = np.mod(e.weekday() + np.floor_divide(absolute, self.intervals_per_day), 7)
        return dow, tod


@dataclass(frozen=True)
class TripRecord:
    start_time: datetime
    end_time: datetime
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float

    def __post_init__(self):
        if self.end_time < self.start_time:
            raise DataValidationError("trip ends before it starts")


@dataclass
class TripTable:
    """Columnar trip storage; timestamps are ``datetime64[s]``."""

    start_time: np.ndarray
    end_time: np.ndarray
    start_lat: np.ndarray
    start_lon: np.ndarray
    end_lat: np.ndarray
    end_lon: np.ndarray

    def __post_init__(self):
        self.start_time = np.asarray(self.start_time, dtype="datetime64[s]")
        self.end_time = np.asarray(self.end_time, dtype="datetime64[s]")
        for name in ("start_lat", "start_lon", "end_lat", "end_lon"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.start_time)
        if any(len(getattr(self, c)) != n for c in TRIP_COLUMNS):
            raise ValueError("trip columns differ in length")
        bad = np.flatnonzero(self.end_time < self.start_time)
        if bad.size:
            raise DataValidationError(f"trip {bad[0]} ends before it starts")

    def __len__(self) -> int:
        return len(self.start_time)

    @classmethod
    def empty(cls) -> "TripTable":
        return cls(*(np.array([], dtype="datetime64[s]"),) * 2, *(np.array([]),) * 4)

    @classmethod
    def from_records(cls, records: Iterable[TripRecord]) -> "TripTable":
        records = list(records)
        if not records:
            return cls.empty()
        cols = {c: [getattr(r, c) for r in records] for c in TRIP_COLUMNS}
        return cls(**cols)

    def records(self) -> Iterator[TripRecord]:
        for k in range(len(self)):
            yield TripRecord(
                self.start_time[k].astype(datetime), self.end_time[k].astype(datetime),
                float(self.start_lat[k]), float(self.start_lon[k]),
                float(self.end_lat[k]), float(self.end_lon[k]),
            )

    def concat(self, other: "TripTable") -> "TripTable":
        return TripTable(*(np.concatenate([getattr(self, c), getattr(other, c)]) for c in TRIP_COLUMNS))

    def write_csv(self, path: str | Path) -> None:
        frame = pd.DataFrame({
            "start_time": np.datetime_as_string(self.start_time, unit="s"),
            "end_time": np.datetime_as_string(self.end_time, unit="s"),
            "start_lat": self.start_lat, "start_lon": self.start_lon,
            "end_lat": self.end_lat, "end_lon": self.end_lon,
        })
        frame.to_csv(path, index=False, float_format="%.7f")

    @classmethod
    def read_csv(cls, path: str | Path) -> "TripTable":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = [c for c in TRIP_COLUMNS if c not in frame.columns]
        if missing:
            raise DataValidationError(f"missing columns {missing}", line=1)
        if frame.empty:
            return cls.empty()
        cols = {}
        for c in ("start_time", "end_time"):
            parsed = pd.to_datetime(frame[c], format="ISO8601", errors="coerce")
            bad = np.flatnonzero(parsed.isna().to_numpy())
            if bad.size:
                raise DataValidationError(f"malformed timestamp {frame[c].iloc[bad[0]]!r} in {c}", line=int(bad[0]) + 2)
            if getattr(parsed.dt, "tz", None) is not None:
                parsed = parsed.dt.tz_convert(None)
            cols[c] = parsed.to_numpy().astype("datetime64[s]")
        for c in ("start_lat", "start_lon", "end_lat", "end_lon"):
            vals = pd.to_numeric(frame[c], errors="coerce")
            bad = np.flatnonzero(vals.isna().to_numpy())
            if bad.size:
                raise DataValidationError(f"malformed number {frame[c].iloc[bad[0]]!r} in {c}", line=int(bad[0]) + 2)
            cols[c] = vals.to_numpy(dtype=np.float64)
        backwards = np.flatnonzero(cols["end_time"] < cols["start_time"])
        if backwards.size:
            raise DataValidationError("trip ends before it starts", line=int(backwards[0]) + 2)
        return cls(**cols)


@dataclass
class DiscreteTrips:
    """Trips reduced to (region, interval) endpoints; -1 marks a dropped endpoint."""

    start_cell: np.ndarray
    start_interval: np.ndarray
    end_cell: np.ndarray
    end_interval: np.ndarray
    n_intervals: int

    def __len__(self) -> int:
        return len(self.start_cell)

    @property
    def start_ok(self) -> np.ndarray:
        return self.start_cell >= 0

    @property
    def end_ok(self) -> np.ndarray:
        return self.end_cell >= 0


def discretize(trips, grid: GridSpec, n_intervals: int | None = None) -> DiscreteTrips:
    """Map trips onto grid cells and interval indices.

    Endpoints outside the bounding box or the ``[0, n_intervals)`` window are
    marked -1 and contribute nothing.
    """
    if isinstance(trips, DiscreteTrips):
        return trips
    if not isinstance(trips, TripTable):
        trips = TripTable.from_records(trips)
    sc = grid.locate(trips.start_lat, trips.start_lon)
    ec = grid.locate(trips.end_lat, trips.end_lon)
    si = grid.interval_of(trips.start_time)
    ei = grid.interval_of(trips.end_time)
    if n_intervals is None:
        n_intervals = int(max(si.max(initial=-1), ei.max(initial=-1)) + 1)
    s_bad = (sc < 0) | (si < 0) | (si >= n_intervals)
    e_bad = (ec < 0) | (ei < 0) | (ei >= n_intervals)
    sc = np.where(s_bad, -1, sc)
    ec = np.where(e_bad, -1, ec)
    si = np.where(s_bad, -1, si)
    ei = np.where(e_bad, -1, ei)
    return DiscreteTrips(sc, si, ec, ei, int(n_intervals))


@dataclass
class FlowTensor:
    """Inflow (channel 0) / outflow (channel 1) counts, shape (I, J, T, 2)."""

    values: np.ndarray
    grid: GridSpec

    @property
    def n_intervals(self) -> int:
        return self.values.shape[2]


@dataclass
class TransitionTensor:
    """In/out transition counts between ``focal`` and every region, shape (I, J, T, 2)."""

    values: np.ndarray
    focal: tuple[int, int]


def build_flow_tensor(trips, grid: GridSpec, n_intervals: int | None = None) -> FlowTensor:
    dt = discretize(trips, grid, n_intervals)
    N, T = grid.n_regions, dt.n_intervals
    flat = np.zeros((N * T, 2))
    ok = dt.end_ok
    flat[:, 0] = np.bincount(dt.end_cell[ok] * T + dt.end_interval[ok], minlength=N * T)
    ok = dt.start_ok
    flat[:, 1] = np.bincount(dt.start_cell[ok] * T + dt.start_interval[ok], minlength=N * T)
    return FlowTensor(flat.reshape(grid.n_rows, grid.n_cols, T, 2), grid)


def build_transition_tensor(trips, grid: GridSpec, focal: tuple[int, int], n_intervals: int | None = None) -> TransitionTensor:
    f = grid.region_index(*focal)
    dt = discretize(trips, grid, n_intervals)
    return TransitionTensor(_transitions_for(dt, grid, f), tuple(focal))


def _transitions_for(dt: DiscreteTrips, grid: GridSpec, f: int, incoming=None, outgoing=None) -> np.ndarray:
    N, T = grid.n_regions, dt.n_intervals
    if incoming is None:
        incoming = np.flatnonzero((dt.end_cell == f) & dt.start_ok)
    if outgoing is None:
        outgoing = np.flatnonzero((dt.start_cell == f) & dt.end_ok)
    flat = np.zeros((N * T, 2))
    flat[:, 0] = np.bincount(dt.start_cell[incoming] * T + dt.end_interval[incoming], minlength=N * T)
    flat[:, 1] = np.bincount(dt.end_cell[outgoing] * T + dt.start_interval[outgoing], minlength=N * T)
    return flat.reshape(grid.n_rows, grid.n_cols, T, 2)


class TransitionIndex:
    """Per-focal transition tensors built on demand from one trip set."""

    def __init__(self, trips, grid: GridSpec, n_intervals: int | None = None):
        self.grid = grid
        self.trips = discretize(trips, grid, n_intervals)
        dt = self.trips
        full = dt.start_ok & dt.end_ok
        inc = np.flatnonzero(full)
        self._in_order = inc[np.argsort(dt.end_cell[inc], kind="stable")]
        self._in_bounds = np.searchsorted(dt.end_cell[self._in_order], np.arange(grid.n_regions + 1))
        self._out_order = inc[np.argsort(dt.start_cell[inc], kind="stable")]
        self._out_bounds = np.searchsorted(dt.start_cell[self._out_order], np.arange(grid.n_regions + 1))

    def tensor(self, focal: tuple[int, int]) -> TransitionTensor:
        f = self.grid.region_index(*focal)
        inc = self._in_order[self._in_bounds[f]:self._in_bounds[f + 1]]
        out = self._out_order[self._out_bounds[f]:self._out_bounds[f + 1]]
        return TransitionTensor(_transitions_for(self.trips, self.grid, f, inc, out), tuple(focal))

    def value_range(self, t_end: int) -> tuple[float, float]:
        """Min/max transition count over intervals ``< t_end`` and all focals."""
        dt, N, T = self.trips, self.grid.n_regions, self.trips.n_intervals
        full = dt.start_ok & dt.end_ok
        lo, hi = np.inf, -np.inf
        for time_col in (dt.end_interval, dt.start_interval):
            m = full & (time_col < t_end)
            keys = (dt.start_cell[m] * N + dt.end_cell[m]) * T + time_col[m]
            _, counts = np.unique(keys, return_counts=True)
            possible = N * N * min(t_end, T)
            hi = max(hi, counts.max(initial=0))
            lo = min(lo, 0 if counts.size < possible else counts.min())
        return float(lo), float(hi)


@dataclass
class MinMaxStats:
    """Min-max scaling bounds; scalars or per-column arrays."""

    lo: float | np.ndarray
    hi: float | np.ndarray

    @classmethod
    def fit(cls, x, axis=None) -> "MinMaxStats":
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            raise ValueError("cannot fit min-max stats on an empty array")
        return cls(np.min(x, axis=axis), np.max(x, axis=axis))

    @property
    def span(self):
        return np.asarray(self.hi, dtype=np.float64) - np.asarray(self.lo, dtype=np.float64)

    def apply(self, x) -> np.ndarray:
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (np.asarray(x, dtype=np.float64) - self.lo) / safe, 0.0)

    def invert(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.span + self.lo

    def to_dict(self) -> dict:
        return {"lo": np.asarray(self.lo).tolist(), "hi": np.asarray(self.hi).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxStats":
        lo, hi = d["lo"], d["hi"]
        if isinstance(lo, list):
            return cls(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))
        return cls(float(lo), float(hi))


def fit_minmax(train_tensors: Sequence[np.ndarray]) -> MinMaxStats:
    lo = min(float(np.min(t)) for t in train_tensors)
    hi = max(float(np.max(t)) for t in train_tensors)
    return MinMaxStats(lo, hi)


def apply_minmax(x, stats: MinMaxStats) -> np.ndarray:
    return stats.apply(x)


def invert_minmax(y, stats: MinMaxStats) -> np.ndarray:
    return stats.invert(y)


@dataclass(frozen=True)
class SamplingSpec:
    days: int = 7
    per_day: int = 3

    @property
    def n_steps(self) -> int:
        return self.days * self.per_day + 1

    def offsets(self) -> range:
        return range(-(self.per_day // 2), self.per_day - self.per_day // 2)


def sample_history(t_pred: int, spec: SamplingSpec, intervals_per_day: int) -> list[int]:
    """Periodic history indices, oldest first, ending with ``t_pred - 1``."""
    if spec.per_day >= intervals_per_day - 1:
        raise ValueError("per_day too wide for the day length")
    idx = [t_pred - dd * intervals_per_day + off for dd in range(spec.days, 0, -1) for off in spec.offsets()]
    idx.append(t_pred - 1)
    if idx[0] < 0:
        raise InsufficientHistory(f"t_pred={t_pred} needs interval {idx[0]}")
    return idx


def tailor(x: np.ndarray, focal: tuple[int, int], B: int) -> np.ndarray:
    """B x B window of ``x`` (grid axes first) centred on ``focal``, zero padded."""
    if B < 1 or B % 2 == 0:
        raise ValueError(f"block size must be odd and positive, got {B}")
    I, J = x.shape[:2]
    i, j = focal
    if not (0 <= i < I and 0 <= j < J):
        raise ValueError(f"focal {focal} outside {I}x{J} grid")
    r = B // 2
    out = np.zeros((B, B) + x.shape[2:], dtype=x.dtype)
    i0, i1 = max(i - r, 0), min(i + r + 1, I)
    j0, j1 = max(j - r, 0), min(j + r + 1, J)
    out[i0 - (i - r):i1 - (i - r), j0 - (j - r):j1 - (j - r)] = x[i0:i1, j0:j1]
    return out


@dataclass
class Sample:
    flow: np.ndarray          # (B, B, T, w), normalized
    transition: np.ndarray    # (B, B, T, w), normalized
    day_of_week: np.ndarray   # (T,)
    time_of_day: np.ndarray   # (T,)
    external: np.ndarray      # (T, z)
    focal: tuple[int, int]
    t_pred: int
    target: np.ndarray        # (w,), normalized
    target_raw: np.ndarray    # (w,)


@dataclass
class SampleBatch:
    flow: np.ndarray
    transition: np.ndarray
    day_of_week: np.ndarray
    time_of_day: np.ndarray
    external: np.ndarray
    focal: np.ndarray
    t_pred: np.ndarray
    target: np.ndarray
    target_raw: np.ndarray

    def __len__(self) -> int:
        return len(self.t_pred)

    def sample(self, k: int) -> Sample:
        return Sample(self.flow[k], self.transition[k], self.day_of_week[k], self.time_of_day[k],
                      self.external[k], tuple(int(v) for v in self.focal[k]), int(self.t_pred[k]),
                      self.target[k], self.target_raw[k])

    @classmethod
    def stack(cls, samples: Sequence[Sample]) -> "SampleBatch":
        return cls(
            np.stack([s.flow for s in samples]), np.stack([s.transition for s in samples]),
            np.stack([s.day_of_week for s in samples]), np.stack([s.time_of_day for s in samples]),
            np.stack([s.external for s in samples]), np.array([s.focal for s in samples]),
            np.array([s.t_pred for s in samples]), np.stack([s.target for s in samples]),
            np.stack([s.target_raw for s in samples]),
        )

    def save(self, path: str | Path) -> None:
        np.savez(path, **{k: getattr(self, k) for k in self.__dataclass_fields__})

    @classmethod
    def load(cls, path: str | Path) -> "SampleBatch":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in cls.__dataclass_fields__})


@dataclass
class NormStats:
    flow: MinMaxStats
    transition: MinMaxStats
    external: MinMaxStats | None = None

    def to_dict(self) -> dict:
        d = {"flow": self.flow.to_dict(), "transition": self.transition.to_dict()}
        if self.external is not None:
            d["external"] = self.external.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        ext = d.get("external")
        return cls(MinMaxStats.from_dict(d["flow"]), MinMaxStats.from_dict(d["transition"]),
                   MinMaxStats.from_dict(ext) if ext else None)


class FlowDataset:
    """Materializes samples for (region, t_pred) keys from full-grid tensors.

    Transition blocks are tailored per focal region on first use and kept in
    a bounded cache.
    """

    def __init__(self, flows: FlowTensor, transitions: TransitionIndex, sampling: SamplingSpec,
                 block: int, stats: NormStats, external: np.ndarray | None = None,
                 cache_size: int = 256):
        if block < 1 or block % 2 == 0:
            raise ValueError(f"block size must be odd and positive, got {block}")
        self.flows = flows
        self.grid = flows.grid
        self.transitions = transitions
        self.sampling = sampling
        self.block = block
        self.stats = stats
        T = flows.n_intervals
        self.external = np.zeros((T, 0)) if external is None else np.asarray(external, dtype=np.float64)
        if self.external.shape[0] != T:
            raise ValueError("external features must have one row per interval")
        self._ext_norm = (self.external if stats.external is None else stats.external.apply(self.external)).astype(np.float32)
        r = block // 2
        norm = stats.flow.apply(flows.values).astype(np.float32)
        self._flow_padded = np.pad(norm, ((r, r), (r, r), (0, 0), (0, 0)))
        self._trans_cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    @property
    def n_intervals(self) -> int:
        return self.flows.n_intervals

    @property
    def n_external(self) -> int:
        return self.external.shape[1]

    def first_predictable(self) -> int:
        P = self.grid.intervals_per_day
        return self.sampling.days * P - min(self.sampling.offsets())

    def keys(self, t_start: int, t_stop: int) -> np.ndarray:
        """All (region, t_pred) pairs with t_pred in [t_start, t_stop) and enough history."""
        lo = max(t_start, self.first_predictable())
        skipped = max(0, min(t_stop, self.first_predictable()) - t_start)
        if skipped:
            log.info("skipped %d intervals lacking history", skipped)
        ts = np.arange(lo, min(t_stop, self.n_intervals))
        regions = np.arange(self.grid.n_regions)
        rr, tt = np.meshgrid(regions, ts, indexing="ij")
        return np.stack([rr.ravel(), tt.ravel()], axis=1)

    def _transition_block(self, region: int) -> np.ndarray:
        hit = self._trans_cache.get(region)
        if hit is not None:
            self._trans_cache.move_to_end(region)
            return hit
        focal = self.grid.region_coords(region)
        raw = self.transitions.tensor(focal).values
        block = tailor(self.stats.transition.apply(raw).astype(np.float32), focal, self.block)
        self._trans_cache[region] = block
        if len(self._trans_cache) > self._cache_size:
            self._trans_cache.popitem(last=False)
        return block

    def batch(self, keys: np.ndarray) -> SampleBatch:
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 2)
        P = self.grid.intervals_per_day
        hist = np.stack([sample_history(int(t), self.sampling, P) for t in keys[:, 1]])
        rows, cols = np.divmod(keys[:, 0], self.grid.n_cols)
        B = self.block
        ar = np.arange(B)
        flow = self._flow_padded[(rows[:, None] + ar)[:, :, None, None],
                                 (cols[:, None] + ar)[:, None, :, None],
                                 hist[:, None, None, :]]
        trans = np.stack([self._transition_block(int(r))[:, :, h] for r, h in zip(keys[:, 0], hist)])
        dow, tod = self.grid.descriptors(hist)
        raw = self.flows.values[rows, cols, keys[:, 1]]
        return SampleBatch(
            flow=flow, transition=trans,
            day_of_week=dow, time_of_day=tod, external=self._ext_norm[hist],
            focal=np.stack([rows, cols], axis=1), t_pred=keys[:, 1].copy(),
            target=self.stats.flow.apply(raw).astype(np.float32), target_raw=raw.astype(np.float64),
        )

    def sample(self, region: tuple[int, int], t_pred: int) -> Sample:
        n = self.grid.region_index(*region)
        return self.batch(np.array([[n, t_pred]])).sample(0)


@dataclass
class SampleSet:
    dataset: FlowDataset
    keys: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    def __getitem__(self, k: int) -> Sample:
        return self.dataset.batch(self.keys[k:k + 1]).sample(0)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[SampleBatch]:
        order = np.arange(len(self.keys)) if rng is None else rng.permutation(len(self.keys))
        for s in range(0, len(order), batch_size):
            yield self.dataset.batch(self.keys[order[s:s + batch_size]])

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.dataset, self.keys[np.asarray(idx)])


@dataclass
class Splits:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    dataset: FlowDataset = field(repr=False)


def fit_stats(flows: FlowTensor, transitions: TransitionIndex, train_end: int,
              external: np.ndarray | None = None) -> NormStats:
    """Min-max stats from intervals before ``train_end`` only."""
    flow_stats = MinMaxStats.fit(flows.values[:, :, :train_end])
    trans_stats = MinMaxStats(*transitions.value_range(train_end))
    ext_stats = None
    if external is not None and external.shape[1] > 0:
        ext_stats = MinMaxStats.fit(external[:train_end], axis=0)
    return NormStats(flow_stats, trans_stats, ext_stats)


def make_dataset(flows: FlowTensor, transitions: TransitionIndex, sampling: SamplingSpec, block: int,
                 train_intervals: int, val_fraction: float = 0.2, seed: int = 0,
                 external: np.ndarray | None = None, stats: NormStats | None = None,
                 test_intervals: int | None = None) -> Splits:
    """Temporal train/test split at ``train_intervals``; seeded random validation carve-out."""
    if stats is None:
        stats = fit_stats(flows, transitions, train_intervals, external)
    ds = FlowDataset(flows, transitions, sampling, block, stats, external)
    stop = flows.n_intervals if test_intervals is None else train_intervals + test_intervals
    train_keys = ds.keys(0, train_intervals)
    test_keys = ds.keys(train_intervals, stop)
    if len(train_keys) == 0 or len(test_keys) == 0:
        raise ValueError("empty train or test split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_keys))
    n_val = int(round(val_fraction * len(train_keys)))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if val_fraction > 0 and n_val == 0:
        raise ValueError("empty validation split")
    return Splits(SampleSet(ds, train_keys[tr_idx]), SampleSet(ds, train_keys[val_idx]),
                  SampleSet(ds, test_keys), ds)


def load_external_csv(path: str | Path, columns: Sequence[str], grid: GridSpec, n_intervals: int) -> np.ndarray:
    """Externals CSV with a ``time`` column (interval start) plus named columns."""
    frame = pd.read_csv(path)
    if "time" not in frame.columns:
        raise DataValidationError("external feature file needs a 'time' column", line=1)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataValidationError(f"external columns {missing} not found", line=1)
    times = pd.to_datetime(frame["time"], format="ISO8601", errors="coerce")
    bad = np.flatnonzero(times.isna().to_numpy())
    if bad.size:
        raise DataValidationError("malformed timestamp in external file", line=int(bad[0]) + 2)
    idx = grid.interval_of(times.to_numpy().astype("datetime64[s]"))
    out = np.zeros((n_intervals, len(columns)))
    keep = (idx >= 0) & (idx < n_intervals)
    out[idx[keep]] = frame.loc[keep, list(columns)].to_numpy(dtype=np.float64)
    return out
