"""Per-layer conv cost of the hourglass network against its flat same-depth twin.

    python3 scripts/hourglass_cost.py --size 48
"""

import argparse
from fractions import Fraction

from dmcn.model import ModelConfig, estimate_flops, flat_counterpart, format_flop_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=48)
    args = ap.parse_args()

    cfg = ModelConfig()
    hour = estimate_flops(cfg, args.size, args.size)
    flat = estimate_flops(flat_counterpart(cfg), args.size, args.size)
    print(format_flop_report(hour, flat))
    ratio = Fraction(hour.total, flat.total)
    print(f"exact ratio {ratio} = {float(ratio):.6f}")


if __name__ == "__main__":
    main()
