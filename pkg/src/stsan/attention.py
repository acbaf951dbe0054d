"""Multi-aspect attention and the encoder/decoder STA blocks.

Every spatial cell of the ``B x B`` map is its own attention instance over
the temporal axis, split into ``n_heads`` feature heads. Projections are
shared across cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .config import ModelConfig
from .engine import Module, Parameter, Tensor


@dataclass
class AttentionRecord:
    """Softmax weights of one MAA call, shape (N, B, B, n_heads, T_q, T_k)."""

    kind: str   # encoder_self | decoder_self | decoder_cross
    layer: int
    mode: str
    weights: np.ndarray


class MultiAspectAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dt = cfg.d_model, np.dtype(cfg.dtype)
        # bias-free projections
        self.Wq = Parameter(E.glorot_uniform(rng, (d, d), d, d, dt))
        self.Wk = Parameter(E.glorot_uniform(rng, (d, d), d, d, dt))
        self.Wv = Parameter(E.glorot_uniform(rng, (d, d), d, d, dt))
        self.Wo = Parameter(E.glorot_uniform(rng, (d, d), d, d, dt))

    def _split(self, x: Tensor) -> Tensor:
        N, I, J, T, d = x.shape
        h = self.cfg.n_heads
        return E.transpose(E.reshape(x, (N, I, J, T, h, d // h)), (0, 1, 2, 4, 3, 5))

    def forward(self, q: Tensor, k: Tensor, v: Tensor, rng=None) -> tuple[Tensor, np.ndarray]:
        d = self.cfg.d_model
        for name, t in (("query", q), ("key", k), ("value", v)):
            if t.ndim != 5 or t.shape[-1] != d:
                raise E.ShapeError(f"{name} must be (N, B, B, T, {d}), got {t.shape}")
        if q.shape[:3] != k.shape[:3] or k.shape != v.shape:
            raise E.ShapeError(f"incompatible q/k/v shapes {q.shape} {k.shape} {v.shape}")
        N, I, J, Tq, _ = q.shape
        dh = d // self.cfg.n_heads
        Qh = self._split(E.dense_affine(q, self.Wq))
        Kh = self._split(E.dense_affine(k, self.Wk))
        Vh = self._split(E.dense_affine(v, self.Wv))
        scores = E.matmul(Qh, E.transpose(Kh, (0, 1, 2, 3, 5, 4))) * (1.0 / np.sqrt(dh))
        if self.cfg.softmax_mode == "per_position":
            alpha = E.softmax(scores, axes=-1)
        else:
            # joint normalization over every spatial cell and key step
            alpha = E.softmax(scores, axes=(1, 2, 5))
        weights = alpha.data
        alpha = E.dropout(alpha, self.cfg.dropout, rng, self.training)
        out = E.transpose(E.matmul(alpha, Vh), (0, 1, 2, 4, 3, 5))
        out = E.reshape(out, (N, I, J, Tq, d))
        return E.dense_affine(out, self.Wo), weights


class FeedForward(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, f, dt = cfg.d_model, cfg.ffn_width, np.dtype(cfg.dtype)
        self.W1 = Parameter(E.glorot_uniform(rng, (d, f), d, f, dt))
        self.b1 = Parameter(np.zeros(f, dtype=dt))
        self.W2 = Parameter(E.glorot_uniform(rng, (f, d), f, d, dt))
        self.b2 = Parameter(np.zeros(d, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return E.dense_affine(E.relu(E.dense_affine(x, self.W1, self.b1)), self.W2, self.b2)


class LayerNorm(Module):
    def __init__(self, cfg: ModelConfig):
        dt = np.dtype(cfg.dtype)
        self.eps = cfg.ln_eps
        self.gain = Parameter(np.ones(cfg.d_model, dtype=dt))
        self.bias = Parameter(np.zeros(cfg.d_model, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return E.layer_norm(x, self.gain, self.bias, self.eps)


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.maa = MultiAspectAttention(cfg, rng)
        self.ffn = FeedForward(cfg, rng)
        self.ln1 = LayerNorm(cfg)
        self.ln2 = LayerNorm(cfg)

    def forward(self, H: Tensor, rng=None) -> tuple[Tensor, np.ndarray]:
        p = self.cfg.dropout
        a, w = self.maa.forward(H, H, H, rng)
        x = self.ln1.forward(H + E.dropout(a, p, rng, self.training))
        x = self.ln2.forward(x + E.dropout(self.ffn.forward(x), p, rng, self.training))
        return x, w


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.self_maa = MultiAspectAttention(cfg, rng)
        self.cross_maa = MultiAspectAttention(cfg, rng)
        self.ffn = FeedForward(cfg, rng)
        self.ln1 = LayerNorm(cfg)
        self.ln2 = LayerNorm(cfg)
        self.ln3 = LayerNorm(cfg)

    def forward(self, x: Tensor, enc: Tensor, rng=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        if x.shape[1:3] != enc.shape[1:3]:
            raise E.ShapeError(f"decoder spatial extents {x.shape[1:3]} != encoder {enc.shape[1:3]}")
        p = self.cfg.dropout
        a, w_self = self.self_maa.forward(x, x, x, rng)
        x = self.ln1.forward(x + E.dropout(a, p, rng, self.training))
        a, w_cross = self.cross_maa.forward(x, enc, enc, rng)
        x = self.ln2.forward(x + E.dropout(a, p, rng, self.training))
        x = self.ln3.forward(x + E.dropout(self.ffn.forward(x), p, rng, self.training))
        return x, w_self, w_cross


def encode(H: Tensor, blocks: list[EncoderBlock], records: list | None = None, rng=None) -> Tensor:
    for layer, block in enumerate(blocks):
        H, w = block.forward(H, rng)
        if records is not None:
            records.append(AttentionRecord("encoder_self", layer, block.cfg.softmax_mode, w))
    return H


def decode(dec_in: Tensor, enc_out: Tensor, blocks: list[DecoderBlock], records: list | None = None, rng=None) -> Tensor:
    x = dec_in
    for layer, block in enumerate(blocks):
        x, w_self, w_cross = block.forward(x, enc_out, rng)
        if records is not None:
            mode = block.cfg.softmax_mode
            records.append(AttentionRecord("decoder_self", layer, mode, w_self))
            records.append(AttentionRecord("decoder_cross", layer, mode, w_cross))
    return x
