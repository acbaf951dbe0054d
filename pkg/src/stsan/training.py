"""Loss, warm-up Adam, and the epoch loop with validation checkpointing."""

from __future__ import annotations

import csv
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import engine as E
from .config import TrainConfig
from .data import SampleBatch, Splits
from .evaluation import MetricsReport, evaluate
from .model import StsanModel

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def mse_loss(y_hat, y):
    return E.mse_loss(y_hat, y)


def warmup_lr(step: int, d_model: int, warmup: int) -> float:
    """``d^-0.5 * min(step^-0.5, step * warmup^-1.5)``.

    The rising branch is evaluated as ``(step / warmup) * warmup^-0.5`` so both
    branches agree bit-for-bit at ``step == warmup``.
    """
    if step < 1 or warmup < 1:
        raise ValueError("learning-rate schedule is defined for step >= 1 and warmup >= 1")
    if step < warmup:
        return d_model ** -0.5 * ((step / warmup) * warmup ** -0.5)
    return d_model ** -0.5 * step ** -0.5


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        out["step"] = np.array([self.step], dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step = int(arrays["step"][0])
        self.m = {k[2:]: a.astype(np.float64) for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: a.astype(np.float64) for k, a in arrays.items() if k.startswith("v/")}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_step(params: dict[str, E.Parameter], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise E.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def train_step(model: StsanModel, batch: SampleBatch, state: AdamState, cfg: TrainConfig) -> tuple[float, float, float]:
    """One optimizer step; returns (loss, lr, pre-clip gradient norm)."""
    model.train()
    params = dict(model.named_parameters())
    model.zero_grad()
    try:
        y_hat, _ = model.forward(batch)
        loss = mse_loss(y_hat, batch.target)
    except E.NonFiniteError as exc:
        raise DivergenceError(str(exc)) from exc
    if not math.isfinite(loss.item()):
        raise DivergenceError("loss is not finite")
    E.backward(loss)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64)
             for n, p in params.items()}
    norm = clip_global_norm(grads, cfg.clip_norm) if cfg.clip_norm else math.nan
    lr = cfg.lr_scale * warmup_lr(state.step + 1, model.cfg.d_model, cfg.warmup_steps)
    adam_step(params, grads, state, lr)
    model.zero_grad()
    return loss.item(), lr, norm


@dataclass
class TrainResult:
    best_path: Path | None
    best_score: float
    best_report: MetricsReport | None
    history: list[dict]
    steps: int
    stopped: str


def _ckpt_name(epoch: int, score: float) -> str:
    return f"epoch{epoch:03d}_val{score:.4f}.stsn"


def train(model: StsanModel, splits: Splits, cfg: TrainConfig, log_csv: str | Path | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    """Epoch loop with per-epoch validation, best-checkpoint tracking and early stop.

    Stops once ``patience`` epochs have passed without improving on the best
    validation score (``patience=0`` runs exactly one epoch), at ``max_epochs``,
    at ``max_steps``, or when the wall-clock budget runs out.
    """
    if len(splits.train) == 0 or len(splits.val) == 0:
        raise ValueError("training needs non-empty train and validation sets")
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_csv = Path(log_csv) if log_csv is not None else out_dir / "metrics.csv"
    stats = splits.dataset.stats.flow
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    if resume_from is not None:
        model.load_state(checkpoint.load(resume_from))
        optim = Path(str(resume_from) + ".optim")
        if optim.exists():
            state.load_arrays(checkpoint.load(optim))
    val = splits.val
    if cfg.val_max_samples is not None and len(val) > cfg.val_max_samples:
        val = val.subset(np.linspace(0, len(val) - 1, cfg.val_max_samples).round().astype(np.int64))
    model.cfg.dropout = cfg.dropout
    model.dropout_rng = np.random.default_rng([cfg.seed, 17])
    rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []
    best_score, best_path, best_report = math.inf, None, None
    since_best, steps, stopped = 0, 0, "max_epochs"
    t0 = time.monotonic()
    last_good = None
    with open(log_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_rmse_in", "val_rmse_out", "lr", "steps", "seconds"])
        for epoch in range(1, cfg.max_epochs + 1):
            losses = []
            lr = math.nan
            for k, batch in enumerate(splits.train.batches(cfg.batch_size, rng)):
                if cfg.steps_per_epoch is not None and k >= cfg.steps_per_epoch:
                    break
                try:
                    loss, lr, _ = train_step(model, batch, state, cfg)
                except DivergenceError:
                    if last_good is not None:
                        model.load_state(last_good)
                    log.error("training diverged at step %d; last good checkpoint: %s", steps, best_path)
                    raise
                losses.append(loss)
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                if cfg.time_budget_s is not None and time.monotonic() - t0 > cfg.time_budget_s:
                    break
            report = evaluate(model, val, stats, threshold=cfg.val_threshold)
            score = report.score()
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan,
                   "val_rmse_in": report.rmse_in, "val_rmse_out": report.rmse_out, "lr": lr,
                   "steps": steps, "seconds": round(time.monotonic() - t0, 2)}
            history.append(row)
            writer.writerow(list(row.values()))
            fh.flush()
            log.info("epoch %d loss %.5f val %.4f/%.4f", epoch, row["train_loss"],
                     report.rmse_in or math.nan, report.rmse_out or math.nan)
            last_good = {n: a.copy() for n, a in model.state().items()}
            if score < best_score:
                best_score, best_report, since_best = score, report, 0
                best_path = out_dir / _ckpt_name(epoch, score)
                model.save(best_path)
                checkpoint.save(str(best_path) + ".optim", state.arrays())
                for suffix in ("", ".json", ".optim"):
                    shutil.copyfile(str(best_path) + suffix, str(out_dir / "best.stsn") + suffix)
            else:
                since_best += 1
            if since_best >= cfg.patience:
                stopped = "patience"
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                stopped = "max_steps"
                break
            if cfg.time_budget_s is not None and time.monotonic() - t0 > cfg.time_budget_s:
                stopped = "time_budget"
                break
    if best_path is not None:
        model.load_state(checkpoint.load(best_path))
    return TrainResult(best_path, best_score, best_report, history, steps, stopped)
