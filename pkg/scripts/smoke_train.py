"""Time-boxed training on pooled x2 patches, then PSNR against bicubic on held-out patches.

    python3 scripts/smoke_train.py --minutes 30 --checkpoint smoke.dmcn
"""

import argparse
import time
from dataclasses import replace

import numpy as np
import skimage.data

from dmcn.data import DegradationSpec, Image, extract_patches, make_ilr, to_single_channel
from dmcn.metrics import evaluate_pairs
from dmcn.model import ModelConfig, build_model
from dmcn.training import TrainConfig, make_checkpoint, save_checkpoint, train

IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "camera")


def pooled_patches(seed=0, holdout=0.2):
    pool = []
    for name in IMAGES:
        hr = to_single_channel(Image.from_array(getattr(skimage.data, name)() / 255.0))
        ilr, hr = make_ilr(hr, DegradationSpec(2))
        pool += extract_patches(hr, ilr, source=name).patches
    order = np.random.default_rng(seed).permutation(len(pool))
    cut = int(round(holdout * len(pool)))
    return [pool[i] for i in order[cut:]], [pool[i] for i in order[:cut]]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--minutes", type=float, default=30)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--decay-every", type=int, default=15)
    ap.add_argument("--checkpoint")
    args = ap.parse_args()

    train_set, test_set = pooled_patches()
    x = np.stack([p.ilr.pixels.transpose(2, 0, 1) for p in train_set]).astype(np.float32)
    y = np.stack([p.hr.pixels.transpose(2, 0, 1) for p in train_set]).astype(np.float32)
    print(f"{len(x)} training patches, {len(test_set)} held out")

    model = build_model(ModelConfig())
    cfg = TrainConfig(epochs=1, batch_size=args.batch_size, decay_every_epochs=args.decay_every)
    state = history = None
    epoch, start = 0, time.perf_counter()
    while time.perf_counter() - start < args.minutes * 60:
        history, state = train(model, x, y, replace(cfg, epochs=epoch + 1), state, history, epoch)
        rec = history.epochs[-1]
        print(f"epoch {epoch:3d}  lr {rec.lr:.1e}  loss {rec.loss:.5f}  {time.perf_counter() - start:6.0f} s", flush=True)
        epoch += 1

    pairs = [(f"{p.source}@{p.x},{p.y}", p.ilr, p.hr) for p in test_set]
    result = evaluate_pairs(model, pairs, 2, "held-out")
    print(result.table())
    print(f"gain over bicubic: {result.mean_psnr('DMCN') - result.mean_psnr('Bicubic'):+.3f} dB")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, make_checkpoint(model, state, epoch, history, cfg))


if __name__ == "__main__":
    main()
