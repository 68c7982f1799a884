"""PSNR / SSIM and the evaluation protocol that produces PSNR/SSIM tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import DegradationSpec, Image, load_png, make_ilr, to_single_channel
from .errors import ContractError
from .model import Model, forward
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pixels(img) -> np.ndarray:
    arr = img.pixels if isinstance(img, Image) else np.asarray(img)
    return np.asarray(arr, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` for identical inputs."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ContractError(f"psnr inputs differ in shape: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def _as_plane(img) -> np.ndarray:
    x = _pixels(img)
    if x.ndim == 3:
        if x.shape[2] != 1:
            raise ContractError("ssim expects a single-channel image; convert to luminance first")
        x = x[:, :, 0]
    return x


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all window positions where the 11x11 Gaussian window fits."""
    x, y = _as_plane(a), _as_plane(b)
    if x.shape != y.shape:
        raise ContractError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ContractError(
            f"image {x.shape[1]}x{x.shape[0]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    g = gaussian_window()
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalRow:
    image: str
    method: str
    psnr: float
    ssim: float


@dataclass
class EvalResult:
    dataset: str
    scale: int
    rows: list[EvalRow] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def _of(self, method: str) -> list[EvalRow]:
        return [r for r in self.rows if r.method == method]

    def mean_psnr(self, method: str) -> float:
        return float(np.mean([r.psnr for r in self._of(method)]))

    def mean_ssim(self, method: str) -> float:
        return float(np.mean([r.ssim for r in self._of(method)]))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "scale", "method", "psnr", "ssim"])
        for m in self.methods():
            w.writerow([self.dataset, self.scale, m, _fmt(self.mean_psnr(m), 4), _fmt(self.mean_ssim(m), 6)])
        return buf.getvalue()

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "method", "psnr", "ssim"])
        for r in self.rows:
            w.writerow([r.image, r.method, _fmt(r.psnr, 4), _fmt(r.ssim, 6)])
        return buf.getvalue()

    def table(self) -> str:
        """One line per dataset/scale with a PSNR/SSIM cell per method."""
        methods = self.methods()
        cells = [cell(self.mean_psnr(m), self.mean_ssim(m)) for m in methods]
        width = max([len(c) for c in cells] + [len(m) for m in methods] + [9])
        head = f"{'Dataset':<14} {'Scale':<5} " + " ".join(f"{m:>{width}}" for m in methods)
        sub = f"{'':<14} {'':<5} " + " ".join(f"{'PSNR/SSIM':>{width}}" for _ in methods)
        row = f"{self.dataset:<14} {'x' + str(self.scale):<5} " + " ".join(f"{c:>{width}}" for c in cells)
        lines = [head, sub, row]
        for image, message in self.errors:
            lines.append(f"skipped {image}: {message}")
        return "\n".join(lines)


def _fmt(value: float, digits: int) -> str:
    return "inf" if math.isinf(value) else f"{value:.{digits}f}"


def cell(p: float, s: float) -> str:
    """``34.19/0.8941`` style PSNR/SSIM pair."""
    return f"{_fmt(p, 2)}/{_fmt(s, 4)}"


def super_resolve(model: Model, ilr: Image) -> Image:
    """Run the network on a single-channel ILR image; output clipped to [0, 1]."""
    x = ilr.pixels.transpose(2, 0, 1)[None].astype(model.dtype)
    y = forward(model, Tensor.wrap(x)).data[0].transpose(1, 2, 0)
    return Image(np.clip(y.astype(np.float64), 0.0, 1.0))


def evaluate_pairs(
    model: Model,
    pairs: Iterable[tuple[str, Image, Image]],
    scale: int,
    dataset: str = "",
    method: str = "DMCN",
) -> EvalResult:
    """Score ``(name, ilr, hr)`` triples for the model and for bicubic (the ILR itself).

    The ILR is rounded to the network dtype first so both rows see the same input.
    """
    result = EvalResult(dataset, scale)
    for name, ilr, hr in pairs:
        try:
            ilr_in = Image(np.clip(ilr.pixels.astype(model.dtype).astype(np.float64), 0.0, 1.0))
            sr = super_resolve(model, ilr_in)
            model_row = EvalRow(name, method, psnr(sr, hr), ssim(sr, hr))
            bicubic_row = EvalRow(name, "Bicubic", psnr(ilr_in, hr), ssim(ilr_in, hr))
        except ContractError as exc:
            result.errors.append((name, str(exc)))
            continue
        result.rows += [bicubic_row, model_row]
    return result


def evaluate(
    model: Model,
    test_paths: Sequence,
    spec: DegradationSpec,
    dataset: str = "",
    method: str = "DMCN",
) -> EvalResult:
    """Degrade each test image, reconstruct it and score against the cropped HR."""
    if not test_paths:
        raise ContractError("test set is empty")

    def pairs():
        for path in test_paths:
            name = Path(path).name
            try:
                hr = to_single_channel(load_png(path))
                ilr, hr_c = make_ilr(hr, spec)
            except (ContractError, OSError) as exc:
                failed.append((name, str(exc)))
                continue
            yield name, ilr, hr_c

    failed: list[tuple[str, str]] = []
    result = evaluate_pairs(model, pairs(), spec.scale, dataset, method)
    result.errors = failed + result.errors
    return result
