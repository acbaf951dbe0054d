"""Threshold-filtered RMSE/MAE, baselines, and attention-based explanations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import FlowTensor, MinMaxStats, SampleBatch, SampleSet

CHANNELS = ("in", "out")


def denormalize(y_hat, stats: MinMaxStats) -> np.ndarray:
    """Inverse min-max, clamped at zero (negative flows are meaningless)."""
    return np.maximum(stats.invert(y_hat), 0.0)


@dataclass
class MetricsReport:
    rmse_in: float | None
    rmse_out: float | None
    mae_in: float | None
    mae_out: float | None
    count_in: int
    count_out: int
    threshold: float
    filter_mode: str = "per_channel"
    notes: dict = field(default_factory=dict)

    def rmse(self, channel: str) -> float | None:
        return getattr(self, f"rmse_{channel}")

    def mae(self, channel: str) -> float | None:
        return getattr(self, f"mae_{channel}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for c in CHANNELS:
            if d[f"count_{c}"] == 0:
                d[f"rmse_{c}"] = d[f"mae_{c}"] = "no samples"
        return d

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def score(self) -> float:
        vals = [v for v in (self.rmse_in, self.rmse_out) if v is not None]
        return float(np.mean(vals)) if vals else math.inf


def rmse_mae(preds, truths_raw, threshold: float = 10.0, filter_mode: str = "per_channel") -> MetricsReport:
    """Per-channel RMSE/MAE over samples whose raw truth is ``>= threshold``.

    ``filter_mode="joint"`` keeps a sample only if every channel passes.
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(len(preds), -1)
    truths = np.asarray(truths_raw, dtype=np.float64).reshape(len(truths_raw), -1)
    if preds.shape != truths.shape:
        raise ValueError(f"prediction/truth shapes differ: {preds.shape} vs {truths.shape}")
    if filter_mode not in ("per_channel", "joint"):
        raise ValueError(f"unknown filter_mode {filter_mode!r}")
    keep = truths >= threshold
    if filter_mode == "joint":
        keep = np.repeat(keep.all(axis=1, keepdims=True), truths.shape[1], axis=1)
    if truths.shape[1] > len(CHANNELS):
        raise ValueError(f"at most {len(CHANNELS)} channels, got {truths.shape[1]}")
    out: dict = {f"{m}_{c}": None for m in ("rmse", "mae") for c in CHANNELS}
    out.update({f"count_{c}": 0 for c in CHANNELS})
    for c, name in enumerate(CHANNELS[:truths.shape[1]]):
        err = preds[keep[:, c], c] - truths[keep[:, c], c]
        n = int(err.size)
        out[f"count_{name}"] = n
        if n == 0:
            out[f"rmse_{name}"] = out[f"mae_{name}"] = None
        else:
            out[f"rmse_{name}"] = math.sqrt(math.fsum(err * err) / n)
            out[f"mae_{name}"] = math.fsum(np.abs(err)) / n
    return MetricsReport(threshold=float(threshold), filter_mode=filter_mode, **out)


class Predictor(Protocol):
    def predict(self, batch: SampleBatch) -> np.ndarray: ...


class HistoricalAverage:
    """Mean of training-range observations at the same region and time-of-day."""

    def __init__(self, flows: FlowTensor, train_end: int, stats: MinMaxStats):
        I, J, _, w = flows.values.shape
        self.grid = flows.grid
        P = self.grid.intervals_per_day
        _, tod = self.grid.descriptors(np.arange(train_end))
        sums = np.zeros((I, J, P, w))
        np.add.at(sums, (slice(None), slice(None), tod), flows.values[:, :, :train_end])
        counts = np.bincount(tod, minlength=P)
        self.table = sums / np.maximum(counts, 1)[None, None, :, None]
        self.stats = stats

    def predict(self, batch: SampleBatch) -> np.ndarray:
        _, tod = self.grid.descriptors(batch.t_pred)
        raw = self.table[batch.focal[:, 0], batch.focal[:, 1], tod]
        return self.stats.apply(raw)


def collect_predictions(predictor: Predictor, samples: SampleSet, batch_size: int = 256):
    preds, truths, keys = [], [], []
    for batch in samples.batches(batch_size):
        preds.append(np.asarray(predictor.predict(batch), dtype=np.float64))
        truths.append(batch.target_raw)
        keys.append(np.column_stack([batch.focal, batch.t_pred]))
    return np.concatenate(preds), np.concatenate(truths), np.concatenate(keys)


def evaluate(predictor: Predictor, samples: SampleSet, stats: MinMaxStats, threshold: float = 10.0,
             batch_size: int = 256, filter_mode: str = "per_channel",
             breakdown_csv: str | Path | None = None) -> MetricsReport:
    if len(samples) == 0:
        raise ValueError("evaluation set is empty")
    preds, truths, keys = collect_predictions(predictor, samples, batch_size)
    raw = denormalize(preds, stats)
    report = rmse_mae(raw, truths, threshold, filter_mode)
    report.notes["n_samples"] = int(len(truths))
    if breakdown_csv is not None:
        write_region_breakdown(breakdown_csv, raw, truths, keys, threshold, filter_mode)
    return report


def write_region_breakdown(path, raw, truths, keys, threshold, filter_mode) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "count_in", "rmse_in", "mae_in", "count_out", "rmse_out", "mae_out"])
        for r, c in sorted({(int(a), int(b)) for a, b in keys[:, :2]}):
            m = (keys[:, 0] == r) & (keys[:, 1] == c)
            rep = rmse_mae(raw[m], truths[m], threshold, filter_mode)
            wr.writerow([r, c, rep.count_in, rep.rmse_in, rep.mae_in, rep.count_out, rep.rmse_out, rep.mae_out])


# -- explanations ----------------------------------------------------------

@dataclass
class Explanation:
    focal: tuple[int, int]
    t_pred: int
    profile: np.ndarray            # (T,) aggregated temporal attention
    per_layer: np.ndarray          # (L, T) decoder encoder-attention per block
    per_head: np.ndarray           # (L, n_heads, T)
    transition_slice: np.ndarray   # (B, B, w), raw counts
    prediction: np.ndarray         # (w,), raw

    def to_dict(self) -> dict:
        return {
            "focal": list(self.focal), "t_pred": self.t_pred,
            "profile": self.profile.tolist(), "per_layer": self.per_layer.tolist(),
            "per_head": self.per_head.tolist(), "prediction": self.prediction.tolist(),
            "transition_slice_shape": list(self.transition_slice.shape),
        }

    def export(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        d = self.to_dict()
        d["transition_slice"] = self.transition_slice.tolist()
        Path(json_path).write_text(json.dumps(d, indent=2))
        if csv_path is not None:
            write_slice_csv(csv_path, self.transition_slice)

    @classmethod
    def load(cls, json_path: str | Path) -> "Explanation":
        d = json.loads(Path(json_path).read_text())
        return cls(tuple(d["focal"]), int(d["t_pred"]), np.asarray(d["profile"]),
                   np.asarray(d["per_layer"]), np.asarray(d["per_head"]),
                   np.asarray(d["transition_slice"]), np.asarray(d["prediction"]))


def write_slice_csv(path: str | Path, values: np.ndarray) -> None:
    """One row per cell; ``repr`` floats so the round trip is exact."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col"] + [f"c{k}" for k in range(values.shape[2])])
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                wr.writerow([i, j] + [repr(float(v)) for v in values[i, j]])


def read_slice_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    w = len(header) - 2
    n_i = max(int(r[0]) for r in body) + 1
    n_j = max(int(r[1]) for r in body) + 1
    out = np.zeros((n_i, n_j, w))
    for r in body:
        out[int(r[0]), int(r[1])] = [float(v) for v in r[2:]]
    return out


def aggregate_profile(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean over spatial cells, query steps, feature heads and layers of one sample's
    decoder encoder-attention weights. Each record is (B, B, h, T_q, T_k)."""
    per_head = np.stack([r.mean(axis=(0, 1, 3)) for r in records])   # (L, h, T_k)
    per_layer = per_head.mean(axis=1)
    return per_layer.mean(axis=0), per_layer, per_head


def extract_explanation(model, batch: SampleBatch, transition_stats: MinMaxStats,
                        flow_stats: MinMaxStats, k: int = 0) -> Explanation:
    """Explain sample ``k`` of ``batch`` with an eval-mode forward."""
    from . import engine as E

    model.eval()
    with E.no_grad():
        y, diag = model.forward(batch)
    cross = [r.weights[k] for r in diag.records["F"] if r.kind == "decoder_cross"]
    profile, per_layer, per_head = aggregate_profile(cross)
    slice_raw = transition_stats.invert(diag.transition_slice[k].astype(np.float64))
    return Explanation(
        focal=tuple(int(v) for v in batch.focal[k]), t_pred=int(batch.t_pred[k]),
        profile=profile, per_layer=per_layer, per_head=per_head,
        transition_slice=slice_raw, prediction=denormalize(y.data[k].astype(np.float64), flow_stats),
    )


def heat_table(values: np.ndarray, fmt: str = "{:7.1f}") -> str:
    """Plain-text rendering of a 2-D array."""
    return "\n".join(" ".join(fmt.format(v) for v in row) for row in np.asarray(values))
