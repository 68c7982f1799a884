"""L1 loss, Adam, the step learning-rate schedule, the training loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CheckpointFormatError, ContractError
from .model import Model, ModelConfig, build_topology, forward, parameter_shapes
from .tensor import GradTape, Tensor, _record

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr0: float = 5e-4
    decay_every_epochs: int = 10
    decay_factor: float = 0.1
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.decay_every_epochs < 1 or not 0 < self.decay_factor <= 1:
            raise ContractError("bad learning-rate schedule")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements (and so over batch items).

    The gradient at a zero residual is taken as 0.
    """
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor.wrap(np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype))
    count = diff.size

    def backward(g, needs):
        grad = np.sign(diff) * (g / count)
        return grad, -grad

    _record("l1_loss", (pred, target), out, backward)
    return out


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every_epochs)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()},
            {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()},
            0,
        )


def adam_step(
    theta: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_theta, new_m, new_v = {}, {}, {}
    for name, p in theta.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + config.epsilon)
        new_theta[name] = Tensor.wrap((p.data - step).astype(p.dtype, copy=False))
        new_m[name] = m
        new_v[name] = v
    return new_theta, OptimizerState(new_m, new_v, t)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.lr), repr(r.loss)])
        return buf.getvalue()


def _batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # keyed by epoch so a resumed run sees the same order
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> tuple[float, OptimizerState]:
    """Forward, L1 loss, backward and one Adam update.  Mutates ``model.params``."""
    names = list(model.params)
    sources = [model.params[k] for k in names]
    with GradTape() as tape:
        pred = forward(model, Tensor.wrap(x))
        loss = l1_loss(pred, Tensor.wrap(y))
    grads = dict(zip(names, tape.gradient(loss, sources)))
    model.params, state = adam_step(model.params, grads, state, lr, config)
    return loss.item(), state


def train(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    state: OptimizerState | None = None,
    history: History | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, Model, OptimizerState, History], None] | None = None,
) -> tuple[History, OptimizerState]:
    """Mini-batch training on (ILR, HR) arrays of shape (N, C, H, W).

    Trains epochs ``start_epoch .. config.epochs - 1`` and mutates ``model``.
    The batch order depends only on ``config.seed`` and the epoch number.
    """
    if len(inputs) == 0:
        raise ContractError("cannot train on an empty patch set")
    if inputs.shape != targets.shape:
        raise ContractError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    dtype = model.dtype
    inputs = np.asarray(inputs, dtype=dtype)
    targets = np.asarray(targets, dtype=dtype)
    state = state or OptimizerState.zeros_like(model.params)
    history = history or History()
    n = len(inputs)
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config)
        order = _batch_order(n, config.seed, epoch)
        losses, weights = [], []
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            loss, state = train_step(model, inputs[idx], targets[idx], state, lr, config)
            history.step_losses.append(loss)
            losses.append(loss)
            weights.append(len(idx))
        mean = float(np.average(losses, weights=weights))
        history.epochs.append(EpochRecord(epoch, lr, mean))
        log.info("epoch %d lr %.3g loss %.6f", epoch, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, model, state, history)
    return history, state


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"DMCN" | u32 version | u32 len | JSON metadata | u32 tensor count |
#   per tensor: u32 len | UTF-8 name | u32 rank | rank x u32 dims | float32 LE data

MAGIC = b"DMCN"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    epoch: int = 0  # number of completed epochs
    history: History = field(default_factory=History)
    train_config: TrainConfig | None = None


def make_checkpoint(
    model: Model,
    state: OptimizerState | None = None,
    epoch: int = 0,
    history: History | None = None,
    train_config: TrainConfig | None = None,
) -> Checkpoint:
    return Checkpoint(
        model.config,
        {k: v.data for k, v in model.params.items()},
        state,
        epoch,
        history or History(),
        train_config,
    )


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Model:
    topo = build_topology(ckpt.model_config)
    params = {k: Tensor(v, dtype=dtype) for k, v in ckpt.params.items()}
    return Model(ckpt.model_config, topo, params)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config) if ckpt.train_config else None,
        "epoch": ckpt.epoch,
        "step": ckpt.optimizer.t if ckpt.optimizer else None,
        "history": [asdict(r) for r in ckpt.history.epochs],
        "step_losses": ckpt.history.step_losses,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        tensors += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    parts += [_pack_tensor(name, arr) for name, arr in tensors]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not a DMCN checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    meta_len = r.u32("metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        model_config = ModelConfig(**meta["model_config"])
        train_config = TrainConfig(**meta["train_config"]) if meta["train_config"] else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad metadata: {exc}", meta_at) from exc

    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not UTF-8", name_at) from exc
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        size = math.prod(dims)
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor", r.pos)

    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    _check_shapes(params, expected or model_config)
    optimizer = None
    if meta["step"] is not None:
        optimizer = OptimizerState(
            {k: tensors[f"adam.m/{k}"] for k in params},
            {k: tensors[f"adam.v/{k}"] for k in params},
            meta["step"],
        )
    history = History(
        [EpochRecord(**rec) for rec in meta["history"]],
        list(meta["step_losses"]),
    )
    return Checkpoint(model_config, params, optimizer, meta["epoch"], history, train_config)


def _check_shapes(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    want = parameter_shapes(config)
    for name, shape in want.items():
        if name not in params:
            raise ContractError(f"checkpoint is missing tensor {name} {shape}")
        if params[name].shape != shape:
            raise ContractError(
                f"tensor {name} has shape {params[name].shape}, model expects {shape}"
            )
    extra = sorted(set(params) - set(want))
    if extra:
        raise ContractError(f"checkpoint has unexpected tensor {extra[0]}")


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expected)
