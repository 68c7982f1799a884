"""Overfit the default network on 10 patches of one natural image.

    python3 scripts/overfit.py --image astronaut --scale 2 --steps 500 --csv overfit.csv
"""

import argparse
import time

import numpy as np
import skimage.data

from dmcn.data import DegradationSpec, Image, extract_patches, make_ilr, to_single_channel
from dmcn.model import ModelConfig, build_model
from dmcn.training import TrainConfig, train


def patches(name, scale, count=10):
    hr = to_single_channel(Image.from_array(getattr(skimage.data, name)() / 255.0))
    ilr, hr = make_ilr(hr, DegradationSpec(scale))
    ps = extract_patches(hr, ilr)
    ps.patches = ps.patches[:: len(ps) // count][:count]
    return ps.arrays()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image", default="astronaut")
    ap.add_argument("--scale", type=int, default=2)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args()

    x, y = patches(args.image, args.scale)
    print(f"bicubic L1 on the patches: {np.abs(x - y).mean():.5f}")
    model = build_model(ModelConfig(seed=args.seed))
    # one batch per epoch and no decay, so an epoch is one Adam step at a fixed rate
    cfg = TrainConfig(
        epochs=args.steps, lr0=args.lr, batch_size=len(x), decay_every_epochs=10**9, seed=args.seed
    )
    start = time.perf_counter()

    def report(step, model, state, history):
        if step % 25 == 0 or step == args.steps - 1:
            print(f"step {step:4d}  loss {history.step_losses[-1]:.5f}  {time.perf_counter() - start:6.0f} s")

    history, _ = train(model, x, y, cfg, on_epoch=report)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("step,loss\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(history.step_losses))


if __name__ == "__main__":
    main()
