"""Spatial-temporal encoding gate: per-timestamp conv stacks plus timestamp encoding.

All tensors carry a leading batch axis: ``X`` is ``(N, B, B, T, w)``.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .config import ModelConfig
from .engine import Module, Parameter, Tensor


def one_hot_time(day_of_week, time_of_day, external, intervals_per_day: int) -> np.ndarray:
    """``[day-of-week (7) | time-of-day (P) | externals (z)]`` rows, Monday = 0."""
    dow = np.asarray(day_of_week, dtype=np.int64)
    tod = np.asarray(time_of_day, dtype=np.int64)
    ext = np.asarray(external, dtype=np.float64)
    if dow.min(initial=0) < 0 or dow.max(initial=0) > 6:
        raise ValueError("day-of-week out of range 0..6")
    if tod.min(initial=0) < 0 or tod.max(initial=0) >= intervals_per_day:
        raise ValueError(f"time-of-day out of range 0..{intervals_per_day - 1}")
    if ext.shape[:-1] != dow.shape:
        raise ValueError(f"external shape {ext.shape} does not match descriptors {dow.shape}")
    out = np.zeros(dow.shape + (7 + intervals_per_day + ext.shape[-1],))
    np.put_along_axis(out, dow[..., None], 1.0, axis=-1)
    np.put_along_axis(out, 7 + tod[..., None], 1.0, axis=-1)
    out[..., 7 + intervals_per_day:] = ext
    return out


class Steg(Module):
    def __init__(self, cfg: ModelConfig, in_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        d, k, T = cfg.d_model, cfg.kernel_size, cfg.n_steps
        if cfg.use_steg:
            cin = in_channels
            for layer in range(cfg.conv_depth):
                shape = (k, k, cin, d) if cfg.share_conv_stacks else (T, k, k, cin, d)
                bias = (d,) if cfg.share_conv_stacks else (T, d)
                setattr(self, f"W{layer}", Parameter(E.glorot_uniform(rng, shape, k * k * cin, k * k * d, dt)))
                setattr(self, f"b{layer}", Parameter(np.zeros(bias, dtype=dt)))
                cin = d
            width = 7 + cfg.intervals_per_day + cfg.n_external
            h = cfg.ten_width
            self.ten_W1 = Parameter(E.glorot_uniform(rng, (width, h), width, h, dt))
            self.ten_b1 = Parameter(np.zeros(h, dtype=dt))
            self.ten_W2 = Parameter(E.glorot_uniform(rng, (h, d), h, d, dt))
            self.ten_b2 = Parameter(np.zeros(d, dtype=dt))
        else:
            # ablation: pointwise lift to d, no positional or time encoding
            self.W_in = Parameter(E.glorot_uniform(rng, (in_channels, d), in_channels, d, dt))
            self.b_in = Parameter(np.zeros(d, dtype=dt))

    def spatial_encode(self, X: Tensor) -> Tensor:
        """(N, B, B, T, w) -> E_s of shape (N, B, B, T, d)."""
        if X.ndim != 5:
            raise E.ShapeError(f"expected (N, B, B, T, w), got {X.shape}")
        if X.shape[3] != self.cfg.n_steps and not self.cfg.share_conv_stacks:
            raise E.ShapeError(f"history length {X.shape[3]} != {self.cfg.n_steps} conv stacks")
        h = E.transpose(X, (0, 3, 1, 2, 4))  # (N, T, B, B, w)
        for layer in range(self.cfg.conv_depth):
            h = E.relu(E.conv2d(h, getattr(self, f"W{layer}"), getattr(self, f"b{layer}")))
        return E.transpose(h, (0, 2, 3, 1, 4))

    def temporal_encode(self, day_of_week, time_of_day, external) -> Tensor:
        """Descriptors (N, T) -> E_t of shape (N, T, d)."""
        e = one_hot_time(day_of_week, time_of_day, external, self.cfg.intervals_per_day)
        if e.shape[-1] != self.ten_W1.shape[0]:
            raise E.ShapeError(f"time encoding width {e.shape[-1]} != {self.ten_W1.shape[0]}")
        e = Tensor(e.astype(self.ten_W1.dtype))
        hidden = E.relu(E.dense_affine(e, self.ten_W1, self.ten_b1))
        return E.dense_affine(hidden, self.ten_W2, self.ten_b2)

    def forward(self, X: Tensor, day_of_week, time_of_day, external) -> tuple[Tensor, Tensor]:
        """Returns ``H = E_s + E_t`` (E_t broadcast over space) and its latest slice."""
        if self.cfg.use_steg:
            Es = self.spatial_encode(X)
            Et = self.temporal_encode(day_of_week, time_of_day, external)
            N, T, d = Et.shape
            H = Es + E.reshape(Et, (N, 1, 1, T, d))
        else:
            H = E.dense_affine(X, self.W_in, self.b_in)
        return H, H[:, :, :, -1:, :]
