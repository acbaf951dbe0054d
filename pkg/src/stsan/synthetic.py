"""Poisson origin-destination trip generator with planted periodicity."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .data import GridSpec, TripTable


@dataclass
class GenSpec:
    """Intensity per (origin, destination, interval) is
    ``base_rate * daily(tod) * weekly(dow) * attraction[o, d]``.

    ``attraction`` defaults to a seeded gravity model normalized to mean 1.
    Trip duration is ``min_minutes + minutes_per_cell * distance`` plus an
    exponential tail with mean ``jitter_minutes``.
    """

    n_rows: int = 8
    n_cols: int = 8
    n_days: int = 40
    interval_minutes: int = 30
    base_rate: float = 0.5
    daily_amplitude: float = 0.6
    daily_peak_hour: float = 18.0
    weekly_amplitude: float = 0.4
    weekly_peak_day: int = 2
    attraction: list[list[float]] | None = None
    gravity_scale: float = 2.0
    min_minutes: float = 4.0
    minutes_per_cell: float = 3.0
    jitter_minutes: float = 4.0
    seed: int = 0
    epoch: datetime = datetime(2016, 1, 4)
    bbox: tuple[float, float, float, float] = (40.70, 40.85, -74.02, -73.87)

    def __post_init__(self):
        if self.base_rate < 0:
            raise ValueError("base_rate must be nonnegative")
        if not 0 <= self.daily_amplitude <= 1 or not 0 <= self.weekly_amplitude <= 1:
            raise ValueError("amplitudes must lie in [0, 1] so intensities stay nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown GenSpec keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("epoch"), str):
            d["epoch"] = datetime.fromisoformat(d["epoch"])
        if "bbox" in d:
            d["bbox"] = tuple(float(v) for v in d["bbox"])
        return cls(**d)

    @property
    def grid(self) -> GridSpec:
        lat0, lat1, lon0, lon1 = self.bbox
        return GridSpec(self.n_rows, self.n_cols, lat0, lat1, lon0, lon1, self.interval_minutes, self.epoch)

    @property
    def n_intervals(self) -> int:
        return self.n_days * (1440 // self.interval_minutes)

    def daily_profile(self) -> np.ndarray:
        P = 1440 // self.interval_minutes
        hours = (np.arange(P) + 0.5) * self.interval_minutes / 60.0
        return 1.0 + self.daily_amplitude * np.cos(2 * np.pi * (hours - self.daily_peak_hour) / 24.0)

    def weekly_profile(self) -> np.ndarray:
        return 1.0 + self.weekly_amplitude * np.cos(2 * np.pi * (np.arange(7) - self.weekly_peak_day) / 7.0)

    def attraction_matrix(self) -> np.ndarray:
        N = self.n_rows * self.n_cols
        if self.attraction is not None:
            a = np.asarray(self.attraction, dtype=np.float64)
            if a.shape != (N, N) or (a < 0).any():
                raise ValueError(f"attraction must be a nonnegative {N}x{N} matrix")
            return a
        rng = np.random.default_rng([self.seed, 1])
        mass = rng.lognormal(0.0, 0.5, size=N)
        r, c = np.divmod(np.arange(N), self.n_cols)
        dist = np.hypot(r[:, None] - r[None, :], c[:, None] - c[None, :])
        a = mass[:, None] * mass[None, :] * np.exp(-dist / self.gravity_scale)
        return a / a.mean()

    def intensity(self) -> np.ndarray:
        """Expected trips, shape (T, N, N)."""
        grid = self.grid
        dow, tod = grid.descriptors(np.arange(self.n_intervals))
        temporal = self.base_rate * self.daily_profile()[tod] * self.weekly_profile()[dow]
        return temporal[:, None, None] * self.attraction_matrix()[None]


def generate_synthetic(spec: GenSpec) -> TripTable:
    """Sample trips; deterministic given ``spec.seed``.

    Trips whose end time falls past the horizon are discarded so that every
    emitted trip is fully observed.
    """
    rng = np.random.default_rng(spec.seed)
    lam = spec.intensity()
    T, N, _ = lam.shape
    counts = rng.poisson(lam)
    flat = np.flatnonzero(counts)
    reps = counts.ravel()[flat]
    cell = np.repeat(flat, reps)
    t, rem = np.divmod(cell, N * N)
    o, d = np.divmod(rem, N)
    n = len(cell)

    step = spec.interval_minutes * 60
    start = t * step + rng.uniform(0, step, size=n)
    ro, co = np.divmod(o, spec.n_cols)
    rd, cd = np.divmod(d, spec.n_cols)
    dist = np.hypot(ro - rd, co - cd)
    minutes = spec.min_minutes + spec.minutes_per_cell * dist + rng.exponential(spec.jitter_minutes, size=n)
    end = start + minutes * 60
    keep = end < T * step
    start, end = start[keep].astype(np.int64), end[keep].astype(np.int64)
    ro, co, rd, cd = ro[keep], co[keep], rd[keep], cd[keep]
    n = len(start)

    lat0, lat1, lon0, lon1 = spec.bbox
    h = (lat1 - lat0) / spec.n_rows
    w = (lon1 - lon0) / spec.n_cols
    # keep points strictly inside their cell so float rounding never moves them
    u = rng.uniform(0.05, 0.95, size=(4, n))
    epoch = np.datetime64(spec.epoch, "s")
    return TripTable(
        start_time=epoch + start.astype("timedelta64[s]"),
        end_time=epoch + end.astype("timedelta64[s]"),
        start_lat=lat0 + (ro + u[0]) * h,
        start_lon=lon0 + (co + u[1]) * w,
        end_lat=lat0 + (rd + u[2]) * h,
        end_lon=lon0 + (cd + u[3]) * w,
    )
