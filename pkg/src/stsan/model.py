"""Two-stream STSAN model: flow and transition streams joined by gated fusion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import engine as E
from .attention import AttentionRecord, DecoderBlock, EncoderBlock, decode, encode
from .config import ModelConfig, model_config_from_dict
from .data import SampleBatch
from .engine import Module, Parameter, Tensor
from .steg import Steg


class Stream(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.steg = Steg(cfg, cfg.n_channels, rng)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.decoder = [DecoderBlock(cfg, rng) for _ in range(cfg.n_layers)]

    def forward(self, X: Tensor, dow, tod, ext, records: list, rng=None) -> Tensor:
        H, dec_in = self.steg.forward(X, dow, tod, ext)
        enc = encode(H, self.encoder, records, rng)
        out = decode(dec_in, enc, self.decoder, records, rng)
        N, I, J, _, d = out.shape
        return E.reshape(out, (N, I, J, d))


class GatedFusion(Module):
    """K_f conv layers; the transition stream's sigmoid gate scales the flow stream."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.depth = cfg.fusion_depth
        d, k, dt = cfg.d_model, cfg.kernel_size, np.dtype(cfg.dtype)
        fan = k * k * d
        for layer in range(1, cfg.fusion_depth + 1):
            setattr(self, f"Wt{layer}", Parameter(E.glorot_uniform(rng, (k, k, d, d), fan, fan, dt)))
            setattr(self, f"bt{layer}", Parameter(np.zeros(d, dtype=dt)))
            setattr(self, f"Wf{layer}", Parameter(E.glorot_uniform(rng, (k, k, d, d), fan, fan, dt)))
            setattr(self, f"bf{layer}", Parameter(np.zeros(d, dtype=dt)))

    def forward(self, Of: Tensor, Ot: Tensor) -> Tensor:
        if Of.shape != Ot.shape:
            raise E.ShapeError(f"fusion inputs differ: {Of.shape} vs {Ot.shape}")
        for layer in range(1, self.depth + 1):
            Ot = E.relu(E.conv2d(Ot, getattr(self, f"Wt{layer}"), getattr(self, f"bt{layer}")))
            Of = E.relu(E.conv2d(Of, getattr(self, f"Wf{layer}"), getattr(self, f"bf{layer}"))) * E.sigmoid(Ot)
        return Of


class OutputHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d_f = cfg.block_size * cfg.block_size * cfg.d_model
        dt = np.dtype(cfg.dtype)
        self.W = Parameter(E.glorot_uniform(rng, (d_f, cfg.n_channels), d_f, cfg.n_channels, dt))
        self.b = Parameter(np.zeros(cfg.n_channels, dtype=dt))

    def forward(self, Of: Tensor) -> Tensor:
        flat = E.reshape(Of, (Of.shape[0], -1))
        return E.tanh(E.dense_affine(flat, self.W, self.b))


@dataclass
class Diagnostics:
    records: dict[str, list[AttentionRecord]] = field(default_factory=dict)
    transition_slice: np.ndarray | None = None   # (N, B, B, w), model-input scale


class StsanModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.streamF = Stream(cfg, rng)
        self.streamT = Stream(cfg, rng)
        self.fusion = GatedFusion(cfg, rng)
        self.head = OutputHead(cfg, rng)
        self.assign_names()
        self.dropout_rng = np.random.default_rng([cfg.seed, 17])
        self.eval()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            missing, extra = sorted(set(own) - set(arrays)), sorted(set(arrays) - set(own))
            raise checkpoint.CheckpointError(f"parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if arrays[name].shape != p.shape:
                raise checkpoint.CheckpointError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.asarray(arrays[name], dtype=p.dtype).copy()

    def forward(self, batch: SampleBatch) -> tuple[Tensor, Diagnostics]:
        cfg = self.cfg
        B, T, w = cfg.block_size, cfg.n_steps, cfg.n_channels
        if batch.flow.shape[1:] != (B, B, T, w) or batch.transition.shape[1:] != (B, B, T, w):
            raise E.ShapeError(f"sample blocks {batch.flow.shape[1:]} do not match model ({B}, {B}, {T}, {w})")
        dt = np.dtype(cfg.dtype)
        rng = self.dropout_rng if self.training else None
        diag = Diagnostics(records={"F": [], "T": []})
        Of = self.streamF.forward(Tensor(batch.flow.astype(dt)), batch.day_of_week, batch.time_of_day,
                                  batch.external, diag.records["F"], rng)
        Ot = self.streamT.forward(Tensor(batch.transition.astype(dt)), batch.day_of_week, batch.time_of_day,
                                  batch.external, diag.records["T"], rng)
        y_hat = self.head.forward(self.fusion.forward(Of, Ot))
        diag.transition_slice = batch.transition[:, :, :, -1, :].copy()
        return y_hat, diag

    def predict(self, batch: SampleBatch) -> np.ndarray:
        """Eval-mode forward without graph recording."""
        was = self.training
        self.eval()
        try:
            with E.no_grad():
                y, _ = self.forward(batch)
            return y.data
        finally:
            self.train(was)

    def save(self, path: str | Path) -> None:
        """Binary checkpoint plus a ``.json`` sidecar with the model config."""
        path = Path(path)
        checkpoint.save(path, self.state())
        Path(str(path) + ".json").write_text(json.dumps(asdict(self.cfg), indent=2))

    @classmethod
    def load(cls, path: str | Path, cfg: ModelConfig | None = None) -> "StsanModel":
        path = Path(path)
        if cfg is None:
            cfg = model_config_from_dict(json.loads(Path(str(path) + ".json").read_text()))
        model = cls(cfg)
        model.load_state(checkpoint.load(path))
        return model


def stsan_forward(batch: SampleBatch, model: StsanModel, mode: str = "eval") -> tuple[Tensor, Diagnostics]:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    model.train(mode == "train")
    return model.forward(batch)
