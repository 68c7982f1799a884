"""Loss after N steps with and without memory connections, over several seeds.

    python3 scripts/memory_ablation.py --seeds 10 --steps 200 --variants full,no_memory
"""

import argparse
from dataclasses import replace

from dmcn.cli import VARIANTS, parse_variants
from dmcn.model import ModelConfig, build_model
from dmcn.training import TrainConfig, train

from overfit import patches


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image", default="astronaut")
    ap.add_argument("--scale", type=int, default=2)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--variants", default="full,no_memory")
    args = ap.parse_args()

    variants = parse_variants(args.variants)
    x, y = patches(args.image, args.scale)
    print("seed " + " ".join(f"{v:>12}" for v in variants))
    wins = 0
    for seed in range(args.seeds):
        cfg = TrainConfig(epochs=args.steps, batch_size=len(x), decay_every_epochs=10**9, seed=seed)
        finals = []
        for name in variants:
            model = build_model(replace(ModelConfig(seed=seed), **VARIANTS[name]))
            history, _ = train(model, x, y, cfg)
            finals.append(history.step_losses[-1])
        wins += finals[0] <= min(finals[1:], default=finals[0])
        print(f"{seed:4d} " + " ".join(f"{v:12.5f}" for v in finals), flush=True)
    print(f"{variants[0]} is best or tied in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
