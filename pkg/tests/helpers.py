from datetime import datetime, timedelta

import pytest

from stsan.data import GridSpec, TripRecord, TripTable

EPOCH = datetime(2016, 1, 4)  # Monday


def at(minutes: float) -> datetime:
    return EPOCH + timedelta(minutes=minutes)


@pytest.fixture
def grid3():
    """3x3 grid of one-degree cells, 30-minute intervals."""
    return GridSpec(3, 3, 0.0, 3.0, 0.0, 3.0, 30, EPOCH)


@pytest.fixture
def five_trips():
    return [
        TripRecord(at(65), at(100), 0.5, 0.5, 1.5, 1.5),   # (0,0)@2 -> (1,1)@3
        TripRecord(at(5), at(20), 1.5, 1.5, 0.5, 0.5),     # (1,1)@0 -> (0,0)@0
        TripRecord(at(35), at(50), 2.5, 2.5, 2.5, 2.5),    # (2,2)@1 -> (2,2)@1
        TripRecord(at(70), at(80), 0.5, 2.5, 5.0, 5.0),    # (0,2)@2 -> outside
        TripRecord(at(105), at(130), 1.5, 1.5, 0.5, 0.5),  # (1,1)@3 -> (0,0)@4
    ]


@pytest.fixture
def five_trip_table(five_trips):
    return TripTable.from_records(five_trips)


def random_batch(cfg, N=2, seed=0):
    """Random normalized inputs shaped for ``cfg``."""
    import numpy as np
    from stsan.data import SampleBatch

    rng = np.random.default_rng(seed)
    B, T, w = cfg.block_size, cfg.n_steps, cfg.n_channels
    target = rng.random((N, w))
    return SampleBatch(
        flow=rng.random((N, B, B, T, w)),
        transition=rng.random((N, B, B, T, w)),
        day_of_week=rng.integers(0, 7, (N, T)),
        time_of_day=rng.integers(0, cfg.intervals_per_day, (N, T)),
        external=rng.random((N, T, cfg.n_external)),
        focal=rng.integers(0, 4, (N, 2)),
        t_pred=rng.integers(500, 900, N),
        target=target,
        target_raw=target * 100,
    )


def tiny_splits(n_days=4, seed=0, rows=3, cols=3, train_days=3):
    """Small synthetic splits for training tests: 1 day x 3 history steps, B=3."""
    from stsan.data import SamplingSpec, TransitionIndex, build_flow_tensor, make_dataset
    from stsan.synthetic import GenSpec, generate_synthetic

    spec = GenSpec(n_rows=rows, n_cols=cols, n_days=n_days, base_rate=0.3, seed=seed)
    trips = generate_synthetic(spec)
    flows = build_flow_tensor(trips, spec.grid, spec.n_intervals)
    idx = TransitionIndex(trips, spec.grid, spec.n_intervals)
    return make_dataset(flows, idx, SamplingSpec(1, 3), 3, train_days * 48, seed=seed)


def tiny_model_cfg(**kw):
    from stsan.config import ModelConfig

    base = dict(n_layers=1, d_model=8, n_heads=2, block_size=3, n_steps=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def expected_param_count(c) -> int:
    """Closed-form count, written independently of the module tree."""
    d, k, T, w, f = c.d_model, c.kernel_size, c.n_steps, c.n_channels, c.ffn_width
    h = c.ten_width
    stacks = 1 if c.share_conv_stacks else T
    sen = stacks * (k * k * w * d + d) + (c.conv_depth - 1) * stacks * (k * k * d * d + d)
    ten = (7 + c.intervals_per_day + c.n_external) * h + h + h * d + d
    ffn = d * f + f + f * d + d
    enc = 4 * d * d + ffn + 2 * 2 * d
    dec = 8 * d * d + ffn + 3 * 2 * d
    stream = sen + ten + c.n_layers * (enc + dec)
    fusion = 2 * c.fusion_depth * (k * k * d * d + d)
    head = c.block_size ** 2 * d * w + w
    return 2 * stream + fusion + head


ACCEPTANCE_LINES: list[str] = []
