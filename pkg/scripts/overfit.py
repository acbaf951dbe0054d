"""Sanity check: a tiny model should drive the training MSE on 32 fixed
samples below 1e-3 within a few hundred steps."""

import argparse

from stsan.config import ModelConfig, TrainConfig
from stsan.data import SamplingSpec, TransitionIndex, build_flow_tensor, make_dataset
from stsan.model import StsanModel
from stsan.synthetic import GenSpec, generate_synthetic
from stsan.training import AdamState, train_step


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--target", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    spec = GenSpec(n_days=10, seed=args.seed)
    trips = generate_synthetic(spec)
    flows = build_flow_tensor(trips, spec.grid, spec.n_intervals)
    splits = make_dataset(flows, TransitionIndex(trips, spec.grid, spec.n_intervals), SamplingSpec(1, 3), 3,
                          8 * spec.grid.intervals_per_day, seed=args.seed)
    batch = splits.dataset.batch(splits.train.keys[:args.samples])
    model = StsanModel(ModelConfig(n_layers=1, d_model=8, n_heads=2, block_size=3, n_steps=4, dropout=0.0,
                                   seed=args.seed))
    state, tc = AdamState(), TrainConfig(warmup_steps=100, dropout=0.0)
    for step in range(1, args.max_steps + 1):
        loss, lr, norm = train_step(model, batch, state, tc)
        if step % 10 == 0 or loss < args.target:
            print(f"step {step:5d}  mse {loss:.6f}  lr {lr:.2e}  grad-norm {norm:.3f}")
        if loss < args.target:
            print(f"reached {args.target:g} after {step} steps")
            return
    raise SystemExit(f"did not reach {args.target:g} in {args.max_steps} steps (last {loss:.6f})")


if __name__ == "__main__":
    main()
