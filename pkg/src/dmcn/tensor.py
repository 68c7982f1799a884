"""Dense NCHW tensors and the handful of differentiable ops the network needs.

Values are immutable numpy arrays wrapped in :class:`Tensor`.  Differentiation
is tape based: ops executed inside a ``with GradTape() as tape:`` block are
recorded, and :meth:`GradTape.gradient` replays them in reverse.

Ops compute in the dtype of their inputs.  Training runs in float32; gradient
checks switch to float64 with :func:`precision`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError

_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used when building tensors from raw data."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """Read-only array value.

    Rank 4 ``(n, c, h, w)`` is the norm; rank 1 is used for biases and rank 0
    for scalar losses.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt ``arr`` without copying.  The caller gives up write access."""
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _require_rank4(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ContractError(f"{what} must be rank 4 (n, c, h, w), got shape {t.shape}")


@dataclass(frozen=True)
class ConvParams:
    weights: Tensor  # (n_out, c_in, k, k)
    bias: Tensor  # (n_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        _require_rank4(self.weights, "conv weights")
        if self.bias.ndim != 1:
            raise ContractError(f"conv bias must be a vector, got shape {self.bias.shape}")
        n_out, _, kh, kw = self.weights.shape
        if self.bias.shape[0] != n_out:
            raise ContractError(
                f"bias length {self.bias.shape[0]} does not match {n_out} filters"
            )
        if kh != kw:
            raise ContractError(f"only square kernels are supported, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # backward(grad_out, needs) -> one gradient (or None) per input
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple]


class GradTape:
    """Records ops for reverse-mode accumulation.  One tape per thread."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.visited: list[int] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def record(self, op, inputs, output, backward) -> None:
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        grad_target: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each source.

        ``grad_target`` is the cotangent of ``target`` (ones by default), so a
        non-scalar target gives vector-Jacobian products.
        """
        if grad_target is None:
            grad_target = np.ones(target.shape, dtype=target.dtype)
        grad_target = np.asarray(grad_target, dtype=target.dtype)
        if grad_target.shape != target.shape:
            raise ContractError(
                f"cotangent shape {grad_target.shape} != target shape {target.shape}"
            )

        source_ids = {id(s) for s in sources}
        # forward sweep: which tensors depend on a source
        live = set(source_ids)
        for rec in self.records:
            if any(id(t) in live for t in rec.inputs):
                live.add(id(rec.output))

        grads: dict[int, np.ndarray] = {id(target): grad_target}
        self.visited = []
        for index in range(len(self.records) - 1, -1, -1):
            rec = self.records[index]
            out_id = id(rec.output)
            if out_id not in grads:
                continue
            self.visited.append(index)
            g = grads[out_id] if out_id in source_ids else grads.pop(out_id)
            needs = tuple(id(t) in live for t in rec.inputs)
            if not any(needs):
                continue
            in_grads = rec.backward(g, needs)
            for t, need, gi in zip(rec.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            grads.get(id(s), np.zeros(s.shape, dtype=s.dtype)) for s in sources
        ]


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _record(op, inputs, output, backward) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)


# ---------------------------------------------------------------------------
# convolution kernels on raw arrays
#
# Kernels work on channels-last (n, h, w, c) buffers.  Tensors keep NCHW
# semantics but their arrays are usually transposed views of such buffers, so
# the conversions below are free for tensors produced by these ops.


def to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def from_nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    return xp


def _taps(w: np.ndarray) -> np.ndarray:
    """(f, c, k, k) weights as (k, k, c, f)."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0))


# Row block for the shifted-tap kernels: small enough that a block of input,
# output and gradient rows stays in cache across all k*k taps.
_ROW_BLOCK = 1024


def _forward_shifted(xp, wt, ho, wo):
    # Stride 1.  Every output pixel is a sum over taps of (c,) @ (c, f); on the
    # flattened padded batch each tap is one contiguous row range, so the
    # output is computed on the padded grid and the valid part cut out.
    n, hp, wp, c = xp.shape
    k, f = wt.shape[0], wt.shape[3]
    flat = xp.reshape(-1, c)
    rows = flat.shape[0] - (k - 1) * wp - (k - 1)
    full = np.empty((n * hp * wp, f), dtype=xp.dtype)
    full[rows:] = 0
    tmp = np.empty((_ROW_BLOCK, f), dtype=xp.dtype)
    for s in range(0, rows, _ROW_BLOCK):
        e = min(s + _ROW_BLOCK, rows)
        acc, t = full[s:e], tmp[: e - s]
        np.matmul(flat[s:e], wt[0, 0], out=acc)
        for i in range(k):
            for j in range(k):
                if i or j:
                    off = i * wp + j
                    np.matmul(flat[s + off : e + off], wt[i, j], out=t)
                    acc += t
    return np.ascontiguousarray(full.reshape(n, hp, wp, f)[:, :ho, :wo])


def _backward_shifted(g, xp, wt, need_input, need_weights):
    n, hp, wp, c = xp.shape
    k, f = wt.shape[0], wt.shape[3]
    ho, wo = g.shape[1], g.shape[2]
    total = n * hp * wp
    lead = (k - 1) * wp + (k - 1)
    rows = total - lead
    # gradient laid out on the padded grid (zero outside the valid outputs),
    # preceded by `lead` zero rows so the input gradient can be gathered
    gbuf = np.zeros((lead + total, f), dtype=g.dtype)
    gbuf[lead:].reshape(n, hp, wp, f)[:, :ho, :wo] = g
    grows = gbuf[lead : lead + rows]
    flat = xp.reshape(-1, c)
    gw = dxp = None
    if need_weights:
        gw = np.zeros((k, k, c, f), dtype=g.dtype)
        tmp = np.empty((c, f), dtype=g.dtype)
        for s in range(0, rows, _ROW_BLOCK):
            e = min(s + _ROW_BLOCK, rows)
            gr = grows[s:e]
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    np.matmul(flat[s + off : e + off].T, gr, out=tmp)
                    gw[i, j] += tmp
    if need_input:
        # dx[r] = sum over taps of g[r - off] @ w.T, one row block at a time
        wT = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))
        dxp = np.empty_like(flat)
        tmp = np.empty((_ROW_BLOCK, c), dtype=g.dtype)
        for s in range(0, total, _ROW_BLOCK):
            e = min(s + _ROW_BLOCK, total)
            acc, t = dxp[s:e], tmp[: e - s]
            np.matmul(gbuf[lead + s : lead + e], wT[0, 0], out=acc)
            for i in range(k):
                for j in range(k):
                    if i or j:
                        off = i * wp + j
                        np.matmul(gbuf[lead + s - off : lead + e - off], wT[i, j], out=t)
                        acc += t
        dxp = dxp.reshape(n, hp, wp, c)
    return dxp, gw


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i : i + span_h : stride, j : j + span_w : stride]
    return cols.reshape(n * ho * wo, k * k * c)


def _forward_im2col(xp, wt, stride, ho, wo):
    k, c, f = wt.shape[0], wt.shape[2], wt.shape[3]
    cols = _im2col(xp, k, stride, ho, wo)
    return (cols @ wt.reshape(k * k * c, f)).reshape(xp.shape[0], ho, wo, f)


def _backward_im2col(g, xp, wt, stride, need_input, need_weights):
    n, hp, wp, c = xp.shape
    k, f = wt.shape[0], wt.shape[3]
    ho, wo = g.shape[1], g.shape[2]
    g2 = g.reshape(-1, f)
    gw = dxp = None
    if need_weights:
        gw = (_im2col(xp, k, stride, ho, wo).T @ g2).reshape(k, k, c, f)
    if need_input:
        dcols = (g2 @ wt.reshape(k * k * c, f).T).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros_like(xp)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, :, :, i, j]
    return dxp, gw


def _conv_forward(x, w, b, stride, pad):
    """NCHW in, NCHW out.  Also returns the padded channels-last input for reuse."""
    k = w.shape[2]
    xp = _pad_nhwc(to_nhwc(x), pad)
    ho = _out_size(x.shape[2], k, stride, pad)
    wo = _out_size(x.shape[3], k, stride, pad)
    wt = _taps(w)
    if stride == 1:
        out = _forward_shifted(xp, wt, ho, wo)
    else:
        out = _forward_im2col(xp, wt, stride, ho, wo)
    out += b
    return from_nhwc(out), xp


def _conv_backward(g, x, w, stride, pad, need_input=True, need_weights=True, xp=None):
    n, c, h, wd = x.shape
    if xp is None:
        xp = _pad_nhwc(to_nhwc(x), pad)
    gh = to_nhwc(g)
    wt = _taps(w)
    if stride == 1:
        dxp, gw = _backward_shifted(gh, xp, wt, need_input, need_weights)
    else:
        dxp, gw = _backward_im2col(gh, xp, wt, stride, need_input, need_weights)
    grad_b = gh.sum(axis=(0, 1, 2))
    grad_w = None if gw is None else np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
    grad_x = None
    if dxp is not None:
        grad_x = from_nhwc(np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + wd]))
    return grad_x, grad_w, grad_b


def _check_conv(x: Tensor, params: ConvParams) -> None:
    _require_rank4(x, "conv input")
    if x.shape[1] != params.in_channels:
        raise ContractError(
            f"conv input shape {x.shape} has {x.shape[1]} channels but weights "
            f"{params.weights.shape} expect {params.in_channels}"
        )
    k, p = params.kernel, params.padding
    if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
        raise ContractError(
            f"padded input {x.shape[2] + 2 * p}x{x.shape[3] + 2 * p} smaller than kernel {k}"
        )


# ---------------------------------------------------------------------------
# public ops


def conv2d_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Untaped convolution: zero padding, cross-correlation, plus bias."""
    _check_conv(x, params)
    out, _ = _conv_forward(
        x.data, params.weights.data, params.bias.data, params.stride, params.padding
    )
    return Tensor.wrap(out)


def conv2d_backward(grad_out: Tensor, x: Tensor, params: ConvParams):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    _check_conv(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    expected = (
        x.shape[0],
        params.out_channels,
        _out_size(x.shape[2], k, s, p),
        _out_size(x.shape[3], k, s, p),
    )
    if grad_out.shape != expected:
        raise ContractError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    gx, gw, gb = _conv_backward(grad_out.data, x.data, params.weights.data, s, p)
    return Tensor.wrap(gx), Tensor.wrap(gw), Tensor.wrap(gb)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Taped convolution."""
    _check_conv(x, params)
    w, s, p = params.weights.data, params.stride, params.padding
    data, xp = _conv_forward(x.data, w, params.bias.data, s, p)
    out = Tensor.wrap(data)

    def backward(g, needs):
        return _conv_backward(g, x.data, w, s, p, needs[0], needs[1], xp=xp)

    _record("conv2d", (x, params.weights, params.bias), out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor.wrap(np.maximum(x.data, 0))
    _record("relu", (x,), out, lambda g, needs: (relu_backward_array(g, x.data),))
    return out


def relu_backward_array(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    """Gradient passes where the input is strictly positive."""
    return Tensor.wrap(relu_backward_array(grad_out.data, x.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    out = Tensor.wrap(a.data + b.data)
    _record("add", (a, b), out, lambda g, needs: (g, g))
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a ``factor`` x ``factor`` block."""
    _require_rank4(x, "upsample input")
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    xh = to_nhwc(x.data)
    out = np.broadcast_to(xh[:, :, None, :, None, :], (n, h, factor, w, factor, c))
    out = Tensor.wrap(from_nhwc(out.reshape(n, h * factor, w * factor, c)))

    def backward(g, needs):
        return (upsample_nearest_backward_array(g, factor),)

    _record("upsample_nearest", (x,), out, backward)
    return out


def upsample_nearest_backward_array(g: np.ndarray, factor: int) -> np.ndarray:
    n, c, hf, wf = g.shape
    gh = to_nhwc(g).reshape(n, hf // factor, factor, wf // factor, factor, c)
    return from_nhwc(gh.sum(axis=(2, 4)))


def upsample_nearest_backward(grad_out: Tensor, factor: int) -> Tensor:
    return Tensor.wrap(upsample_nearest_backward_array(grad_out.data, factor))


# ---------------------------------------------------------------------------
# finite differences


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative error between taped and central-difference gradients.

    The output of ``op`` is reduced to a scalar with a fixed random cotangent,
    so every input element is checked through one vector-Jacobian product.
    Runs in float64 regardless of the input dtypes.
    """
    inputs = [t.astype(np.float64) for t in inputs]
    with GradTape() as tape:
        out = op(*inputs)
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(out.shape)
    analytic = tape.gradient(out, inputs, cot)

    def objective(args) -> float:
        return float(np.sum(op(*args).data * cot))

    worst = 0.0
    for index, t in enumerate(inputs):
        base = t.numpy()
        flat = base.reshape(-1)
        ana = np.asarray(analytic[index]).reshape(-1)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + epsilon
            args = list(inputs)
            args[index] = Tensor(base, dtype=np.float64)
            up = objective(args)
            flat[e] = orig - epsilon
            args[index] = Tensor(base, dtype=np.float64)
            down = objective(args)
            flat[e] = orig
            num = (up - down) / (2 * epsilon)
            denom = max(abs(ana[e]), abs(num), 1e-8)
            worst = max(worst, abs(ana[e] - num) / denom)
    return worst
