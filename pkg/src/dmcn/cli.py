"""Command-line entry point: ``dmcn {prepare,train,eval,sr,ablate,flops}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    PATCH_SIZE,
    DegradationSpec,
    Image,
    PatchSet,
    bicubic_resize,
    crop_multiple,
    extract_patches,
    list_images,
    load_png,
    make_ilr,
    rgb_to_ycbcr,
    save_png,
    split_dataset,
    to_single_channel,
    ycbcr_to_rgb,
)
from .errors import CheckpointFormatError, ContractError
from .metrics import evaluate, super_resolve
from .model import ModelConfig, build_model, estimate_flops, flat_counterpart, format_flop_report
from .training import (
    History,
    TrainConfig,
    load_checkpoint,
    make_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("dmcn")

VARIANTS = {
    "full": {},
    "no_local": {"enable_local_memory": False},
    "no_global": {"enable_global_memory": False},
    "no_memory": {"enable_local_memory": False, "enable_global_memory": False},
    "no_hourglass": {"enable_hourglass": False, "flat_same_depth": True},
}


@dataclass
class RunConfig:
    # model
    channels: int = 64
    kernel: int = 3
    blocks_per_stage: int = 4
    enable_local_memory: bool = True
    enable_global_memory: bool = True
    enable_hourglass: bool = True
    flat_same_depth: bool = False
    input_channels: int = 1
    residual_init_scale: float = 0.1
    # training
    epochs: int | None = None
    lr0: float = 5e-4
    decay_every_epochs: int = 10
    decay_factor: float = 0.1
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    # data and run
    seed: int = 0
    scale: int = 2
    ratio: float = 0.8
    data_dir: str | None = None
    out: str = "runs"
    variants: str = "full,no_local,no_global,no_memory"

    def model_config(self, **overrides) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw.update(overrides)
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        if self.epochs is None:
            raise ContractError("epochs is required (set epochs=N in the config or pass --epochs)")
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


def _coerce(name: str, raw: str):
    field_types = {f.name: f.type for f in fields(RunConfig)}
    if name not in field_types:
        raise ContractError(f"unknown config key {name!r}")
    kind = field_types[name]
    if "bool" in kind:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ContractError(f"{name}: {exc}") from exc
    return raw.strip()


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    for key in ("seed", "scale", "out", "epochs", "data_dir"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    cfg = RunConfig(**values)
    DegradationSpec(cfg.scale)
    return cfg


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    cfg = load_run_config(args)
    paths = list_images(args.in_dir)
    if not paths:
        raise ContractError(f"no PNG images found in {args.in_dir}")
    split = split_dataset([str(p) for p in paths], cfg.ratio, cfg.seed)
    spec = DegradationSpec(cfg.scale)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    patches = PatchSet()
    skipped = 0
    for path in split.train_paths:
        try:
            hr = to_single_channel(load_png(path))
            ilr, hr_c = make_ilr(hr, spec)
        except (ContractError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        patches.extend(extract_patches(hr_c, ilr, PATCH_SIZE, source=path))

    (out / "train.txt").write_text("".join(p + "\n" for p in split.train_paths))
    (out / "test.txt").write_text("".join(p + "\n" for p in split.test_paths))
    (out / "manifest.txt").write_text(patches.manifest())
    if len(patches):
        ilr_arr, hr_arr = patches.arrays()
    else:
        ilr_arr = hr_arr = np.zeros((0, 1, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    np.save(out / "patches_ilr.npy", ilr_arr)
    np.save(out / "patches_hr.npy", hr_arr)
    summary = (
        f"images {len(paths)}\ntrain {len(split.train_paths)}\ntest {len(split.test_paths)}\n"
        f"patches {len(patches)}\nskipped {skipped}\nscale {cfg.scale}\nseed {cfg.seed}\n"
    )
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def load_patches(data_dir) -> tuple[np.ndarray, np.ndarray]:
    if data_dir is None:
        raise ContractError("data_dir is required (the output directory of `dmcn prepare`)")
    data = Path(data_dir)
    ilr_path, hr_path = data / "patches_ilr.npy", data / "patches_hr.npy"
    if not ilr_path.exists() or not hr_path.exists():
        raise ContractError(f"no prepared patches in {data} (run `dmcn prepare` first)")
    return np.load(ilr_path), np.load(hr_path)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    tc = cfg.train_config()
    inputs, targets = load_patches(cfg.data_dir)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.dmcn"

    mc = cfg.model_config(input_channels=inputs.shape[1])
    model, state, history, start = build_model(mc), None, None, 0
    if args.resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path, mc)
        model = model_from_checkpoint(ckpt)
        state, history, start = ckpt.optimizer, ckpt.history, ckpt.epoch

    def on_epoch(epoch, model, state, history):
        save_checkpoint(ckpt_path, make_checkpoint(model, state, epoch + 1, history, tc))
        (out / "history.csv").write_text(history.to_csv())

    history, _ = train(model, inputs, targets, tc, state, history, start, on_epoch)
    (out / "history.csv").write_text(history.to_csv())
    if history.epochs:
        last = history.epochs[-1]
        print(f"trained {len(history.epochs)} epochs, final loss {last.loss:.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    if args.test_list:
        paths = [ln.strip() for ln in Path(args.test_list).read_text().splitlines() if ln.strip()]
    elif args.test_dir:
        paths = [str(p) for p in list_images(args.test_dir)]
    else:
        raise ContractError("pass --test-dir or --test-list")
    if not paths:
        raise ContractError("test set is empty")
    dataset = args.dataset or Path(args.test_dir or args.test_list).stem
    result = evaluate(model, paths, DegradationSpec(cfg.scale), dataset=dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = result.table() + "\n"
    (out / "report.txt").write_text(report)
    (out / "summary.csv").write_text(result.summary_csv())
    (out / "per_image.csv").write_text(result.per_image_csv())
    print(report, end="")
    return 0


# ---------------------------------------------------------------------------
# sr


def _pad_to(img: Image, multiple: int) -> Image:
    ph = -img.height % multiple
    pw = -img.width % multiple
    if ph == 0 and pw == 0:
        return img
    return Image(np.pad(img.pixels, ((0, ph), (0, pw), (0, 0)), mode="edge"))


def cmd_sr(args) -> int:
    cfg = load_run_config(args)
    spec = DegradationSpec(cfg.scale)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    try:
        img = load_png(args.image)
    except OSError as exc:
        raise ContractError(f"cannot decode {args.image}: {exc}") from exc

    if args.assume_lr:
        ilr = bicubic_resize(img, img.width * spec.scale, img.height * spec.scale)
    else:
        ilr, _ = make_ilr(img, spec, min_size=crop_multiple(spec.scale))
    h, w = ilr.height, ilr.width
    divisor = model.config.divisor

    if model.config.input_channels == 3:
        rgb = ilr if ilr.channels == 3 else Image(np.repeat(ilr.pixels, 3, axis=2))
        out = super_resolve(model, _pad_to(rgb, divisor)).crop(0, 0, w, h)
    elif ilr.channels == 1:
        out = super_resolve(model, _pad_to(ilr, divisor)).crop(0, 0, w, h)
    else:
        ycc = rgb_to_ycbcr(ilr)
        luma = Image(np.clip(ycc.pixels[:, :, :1], 0.0, 1.0))
        y = super_resolve(model, _pad_to(luma, divisor)).crop(0, 0, w, h)
        out = ycbcr_to_rgb(Image(np.concatenate([y.pixels, ycc.pixels[:, :, 1:]], axis=2)))
    target = Path(cfg.out if args.out is None else args.out)
    if target.suffix.lower() != ".png":
        target.mkdir(parents=True, exist_ok=True)
        target = target / (Path(args.image).stem + f"_x{spec.scale}.png")
    save_png(target, out)
    print(f"wrote {target} ({out.width}x{out.height})")
    return 0


# ---------------------------------------------------------------------------
# ablate


def parse_variants(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise ContractError(f"unknown variant {unknown[0]!r}; choose from {', '.join(VARIANTS)}")
    if not names:
        raise ContractError("no variants given")
    return names


def run_ablation(cfg: RunConfig, variants, inputs, targets) -> dict[str, History]:
    tc = cfg.train_config()
    histories = {}
    for name in variants:
        mc = cfg.model_config(input_channels=inputs.shape[1], **VARIANTS[name])
        model = build_model(mc)
        log.info("ablation variant %s", name)
        histories[name], _ = train(model, inputs, targets, tc)
    return histories


def ablation_csv(histories: dict[str, History], batches_per_epoch: int) -> str:
    """Per-step losses of every variant on a shared step grid (with the epoch of each step)."""
    names = list(histories)
    steps = len(next(iter(histories.values())).step_losses)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch"] + names)
    for s in range(steps):
        w.writerow([s + 1, s // batches_per_epoch] + [repr(histories[n].step_losses[s]) for n in names])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    variants = parse_variants(args.variants or cfg.variants)
    inputs, targets = load_patches(cfg.data_dir)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    histories = run_ablation(cfg, variants, inputs, targets)
    batches = -(-len(inputs) // cfg.batch_size)
    (out / "ablation.csv").write_text(ablation_csv(histories, batches))
    lines = ["variant final_loss"]
    lines += [f"{n} {h.epochs[-1].loss:.6f}" for n, h in histories.items() if h.epochs]
    if "no_hourglass" in variants:
        size = PATCH_SIZE
        mc = cfg.model_config()
        full = estimate_flops(replace(mc, enable_hourglass=True, flat_same_depth=False), size, size)
        flat = estimate_flops(flat_counterpart(mc), size, size)
        flops_text = (
            f"input {size}x{size}\nhourglass_total {full.total}\nno_hourglass_total {flat.total}\n"
            f"ratio_percent {100 * full.total / flat.total:.2f}\n"
        )
        (out / "flops.txt").write_text(flops_text)
        lines.append(flops_text.rstrip())
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# flops


def cmd_flops(args) -> int:
    cfg = load_run_config(args)
    h = args.height or args.size
    w = args.width or args.size
    mc = cfg.model_config()
    report = estimate_flops(mc, h, w)
    flat = None
    if mc.enable_hourglass:
        flat = estimate_flops(flat_counterpart(mc), h, w)
    print(format_flop_report(report, flat))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--scale", type=int, choices=(2, 3, 4))
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dmcn", description="DMCN super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[shared], help="split a PNG directory and cut 48x48 patches")
    p.add_argument("in_dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[shared], help="train on prepared patches")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.dmcn")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="PSNR/SSIM of a checkpoint vs bicubic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-dir")
    p.add_argument("--test-list", help="file with one image path per line (e.g. test.txt)")
    p.add_argument("--dataset", help="name used in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sr", parents=[shared], help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--assume-lr", action="store_true", help="treat the input as the LR image")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("ablate", parents=[shared], help="train architecture variants side by side")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", help=f"comma separated subset of {','.join(VARIANTS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flops", parents=[shared], help="conv cost per layer, hourglass vs flat")
    p.add_argument("--size", type=int, default=PATCH_SIZE)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ContractError, CheckpointFormatError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dmcn {args.command}: error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
