"""DMCN topology: builder, forward pass, layer accounting and the conv cost model.

Default layout (64 channels, 3x3 kernels, 4 blocks per stage)::

    input conv (1 -> 64)
    stage 1: 4 blocks                         full resolution
    down unit: conv s2, conv, ReLU
    stage 2: 4 blocks                         1/2
    down unit: conv s2, conv, ReLU
    stage 3: 4 blocks                         1/4
    up unit: nearest x2, 3 x (conv, ReLU)     1/2   (+ features saved before 2nd down unit)
    up unit: nearest x2, 3 x (conv, ReLU)     full  (+ features saved before 1st down unit)
    output conv (64 -> 1)                           (+ network input)

A block is conv, ReLU, conv with an additive skip around it.  Counting conv
and ReLU layers gives 1 + 36 + 6 + 12 + 1 = 56.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .tensor import ConvParams, Tensor, add, conv2d, relu, upsample_nearest

N_STAGES = 2 + 1  # two down units separate three stages
N_RESIZE = 2
UP_UNIT_CONVS = 3
INPUT = -1  # skip-table index of the network input


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    kernel: int = 3
    blocks_per_stage: int = 4
    enable_local_memory: bool = True
    enable_global_memory: bool = True
    enable_hourglass: bool = True
    # With the hourglass disabled, keep the down/up unit convs at stride 1 (and
    # drop the resizes) instead of removing the units.  This is the same-depth
    # flat network the hourglass is compared against.
    flat_same_depth: bool = False
    input_channels: int = 1
    seed: int = 0
    # Std multiplier for a conv whose output ends at a memory connection (the
    # last conv of a block, the output conv).  Without the skip the plain He
    # scale is kept, so ablated variants are not starved of signal.
    residual_init_scale: float = 0.1

    def __post_init__(self):
        if self.channels < 1 or self.input_channels < 1:
            raise ContractError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel must be odd, got {self.kernel}")
        if self.blocks_per_stage < 0:
            raise ContractError("blocks_per_stage must be >= 0")

    @property
    def has_units(self) -> bool:
        return self.enable_hourglass or self.flat_same_depth

    @property
    def divisor(self) -> int:
        """Required divisibility of input height/width."""
        return 2**N_RESIZE if self.enable_hourglass else 1


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" | "relu" | "upsample"
    name: str
    role: str  # input | block | down | up | output
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    factor: int = 1
    # second conv of a residual block; zeroed by identity_init
    branch_end: bool = False


@dataclass(frozen=True)
class Topology:
    layers: tuple[Layer, ...]
    # (source, destination): output of ``source`` (or the input, -1) is added to
    # the output of ``destination``.
    skips: tuple[tuple[int, int], ...]


def build_topology(config: ModelConfig) -> Topology:
    C, k = config.channels, config.kernel
    pad = (k - 1) // 2
    layers: list[Layer] = []
    skips: list[tuple[int, int]] = []

    def conv(cin, cout, role, stride=1, branch_end=False):
        layers.append(
            Layer("conv", f"conv{len(layers):02d}", role, cin, cout, k, stride, pad, branch_end=branch_end)
        )

    def act(role):
        layers.append(Layer("relu", f"relu{len(layers):02d}", role))

    conv(config.input_channels, C, "input")
    saved = []
    for stage in range(N_STAGES):
        for _ in range(config.blocks_per_stage):
            src = len(layers) - 1
            conv(C, C, "block")
            act("block")
            conv(C, C, "block", branch_end=True)
            if config.enable_local_memory:
                skips.append((src, len(layers) - 1))
        if stage < N_STAGES - 1 and config.has_units:
            saved.append(len(layers) - 1)
            conv(C, C, "down", stride=2 if config.enable_hourglass else 1)
            conv(C, C, "down")
            act("down")
    if config.has_units:
        for _ in range(N_RESIZE):
            if config.enable_hourglass:
                layers.append(Layer("upsample", f"up{len(layers):02d}", "up", factor=2))
            for _ in range(UP_UNIT_CONVS):
                conv(C, C, "up")
                act("up")
            src = saved.pop()
            if config.enable_global_memory:
                skips.append((src, len(layers) - 1))
    conv(C, config.input_channels, "output", branch_end=True)
    if config.enable_global_memory:
        skips.append((INPUT, len(layers) - 1))
    topo = Topology(tuple(layers), tuple(skips))
    _check_skip_shapes(topo, config)
    return topo


def _trace_shapes(topo: Topology, channels: int, h: int, w: int) -> list[tuple[int, int, int]]:
    """(channels, h, w) after every layer, for an input of the given size."""
    shapes = []
    c = channels
    for layer in topo.layers:
        if layer.kind == "conv":
            c = layer.out_channels
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        elif layer.kind == "upsample":
            h, w = h * layer.factor, w * layer.factor
        shapes.append((c, h, w))
    return shapes


def _check_skip_shapes(topo: Topology, config: ModelConfig) -> None:
    size = 12 * config.divisor
    shapes = _trace_shapes(topo, config.input_channels, size, size)
    input_shape = (config.input_channels, size, size)
    for src, dst in topo.skips:
        a = input_shape if src == INPUT else shapes[src]
        if a != shapes[dst]:
            raise AssertionError(f"skip {src}->{dst} joins {a} and {shapes[dst]}")


def count_layers(config: ModelConfig) -> int:
    """Number of conv and ReLU layers; resizes and skip additions are not counted."""
    return sum(layer.kind in ("conv", "relu") for layer in build_topology(config).layers)


@dataclass
class Model:
    config: ModelConfig
    topology: Topology
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def layers(self) -> tuple[Layer, ...]:
        return self.topology.layers

    @property
    def skips(self) -> tuple[tuple[int, int], ...]:
        return self.topology.skips

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def conv_params(self, layer: Layer) -> ConvParams:
        return ConvParams(
            self.params[f"{layer.name}.weight"],
            self.params[f"{layer.name}.bias"],
            layer.stride,
            layer.padding,
        )

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return Model(self.config, self.topology, dict(params))

    def astype(self, dtype) -> "Model":
        return self.with_params({k: v.astype(dtype) for k, v in self.params.items()})


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in build_topology(config).layers:
        if layer.kind == "conv":
            shapes[f"{layer.name}.weight"] = (
                layer.out_channels,
                layer.in_channels,
                layer.kernel,
                layer.kernel,
            )
            shapes[f"{layer.name}.bias"] = (layer.out_channels,)
    return shapes


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Instantiate the topology with seeded He-normal weights and zero biases."""
    topo = build_topology(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    skip_ends = {dst for _, dst in topo.skips}
    for i, layer in enumerate(topo.layers):
        if layer.kind != "conv":
            continue
        fan_in = layer.in_channels * layer.kernel**2
        std = np.sqrt(2.0 / fan_in)
        if i in skip_ends:
            std *= config.residual_init_scale
        w = rng.standard_normal((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
        params[f"{layer.name}.weight"] = Tensor(w * std, dtype=dtype)
        params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_channels), dtype=dtype)
    return Model(config, topo, params)


def identity_init(model: Model) -> Model:
    """Zero the last conv of every residual branch and the output conv.

    With global memory enabled the result maps every input to itself.
    """
    params = dict(model.params)
    for layer in model.layers:
        if layer.kind == "conv" and layer.branch_end:
            for suffix in (".weight", ".bias"):
                key = layer.name + suffix
                params[key] = Tensor(np.zeros_like(params[key].data))
    return model.with_params(params)


def residual_block(
    h: Tensor, first: ConvParams, second: ConvParams, local_memory: bool = True
) -> Tensor:
    """conv -> ReLU -> conv, plus ``h`` when the local memory connection is on."""
    if h.shape[1] != first.in_channels:
        raise ContractError(f"block input has {h.shape[1]} channels, expected {first.in_channels}")
    branch = conv2d(relu(conv2d(h, first)), second)
    return add(h, branch) if local_memory else branch


def check_input(model: Model, x: Tensor) -> None:
    if x.ndim != 4:
        raise ContractError(f"model input must be rank 4, got shape {x.shape}")
    if x.shape[1] != model.config.input_channels:
        raise ContractError(
            f"model expects {model.config.input_channels} input channels, got {x.shape[1]}"
        )
    d = model.config.divisor
    if x.shape[2] % d or x.shape[3] % d:
        raise ContractError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} must be divisible by {d} "
            "(two stride-2 downsampling units)"
        )


def _run(model: Model, x: Tensor, keep_all: bool) -> tuple[Tensor, list[Tensor]]:
    check_input(model, x)
    adds_at = defaultdict(list)
    needed = set()
    for src, dst in model.skips:
        adds_at[dst].append(src)
        needed.add(src)
    saved = {INPUT: x}
    trace = []
    h = x
    for index, layer in enumerate(model.layers):
        if layer.kind == "conv":
            h = conv2d(h, model.conv_params(layer))
        elif layer.kind == "relu":
            h = relu(h)
        else:
            h = upsample_nearest(h, layer.factor)
        for src in adds_at.get(index, ()):
            h = add(saved[src], h)
        if index in needed:
            saved[index] = h
        if keep_all:
            trace.append(h)
    return h, trace


def forward(model: Model, x: Tensor) -> Tensor:
    """Map an ILR batch to the reconstructed HR batch (same shape)."""
    return _run(model, x, keep_all=False)[0]


def forward_trace(model: Model, x: Tensor) -> list[Tensor]:
    """Output of every layer (after any skip additions landing on it)."""
    return _run(model, x, keep_all=True)[1]


@dataclass(frozen=True)
class FlopRecord:
    layer: int
    name: str
    c: int
    f: int
    n: int
    m: int  # output spatial element count
    term: int


@dataclass(frozen=True)
class FlopReport:
    records: tuple[FlopRecord, ...]
    total: int


def estimate_flops(config: ModelConfig, input_h: int, input_w: int) -> FlopReport:
    """Per-layer c * f^2 * n * m for every conv; resize layers cost zero."""
    d = config.divisor
    if input_h % d or input_w % d:
        raise ContractError(f"input size {input_h}x{input_w} must be divisible by {d}")
    topo = build_topology(config)
    shapes = _trace_shapes(topo, config.input_channels, input_h, input_w)
    records = []
    for index, (layer, (_, h, w)) in enumerate(zip(topo.layers, shapes)):
        if layer.kind == "conv":
            c, f, n, m = layer.in_channels, layer.kernel, layer.out_channels, h * w
            records.append(FlopRecord(index, layer.name, c, f, n, m, c * f * f * n * m))
        elif layer.kind == "upsample":
            records.append(FlopRecord(index, layer.name, 0, 0, 0, h * w, 0))
    return FlopReport(tuple(records), sum(r.term for r in records))


def flat_counterpart(config: ModelConfig) -> ModelConfig:
    """Same depth and widths, no spatial reduction."""
    return replace(config, enable_hourglass=False, flat_same_depth=True)


def format_flop_report(report: FlopReport, flat: FlopReport | None = None) -> str:
    lines = [f"{'layer':>5} {'name':<8} {'c':>4} {'f':>2} {'n':>4} {'m':>7} {'c*f^2*n*m':>14}"]
    for r in report.records:
        lines.append(f"{r.layer:>5} {r.name:<8} {r.c:>4} {r.f:>2} {r.n:>4} {r.m:>7} {r.term:>14,}")
    lines.append(f"total {report.total:,}")
    if flat is not None:
        lines.append(f"flat same-depth total {flat.total:,}")
        lines.append(f"hourglass / flat = {100 * report.total / flat.total:.2f}%")
        lines.append(f"reduction = {100 * (1 - report.total / flat.total):.2f}%")
    return "\n".join(lines)
