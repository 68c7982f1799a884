"""Images, bicubic degradation, patch extraction and dataset splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ContractError

PATCH_SIZE = 48
SCALES = (2, 3, 4)
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """Samples in [0, 1], shape (height, width, channels) with 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ContractError(f"image array must be (h, w, 1|3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_array(cls, arr) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr)

    def crop(self, x: int, y: int, w: int, h: int) -> "Image":
        return Image(self.pixels[y : y + h, x : x + w])


@dataclass(frozen=True)
class DegradationSpec:
    scale: int

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ContractError(f"scale must be one of {SCALES}, got {self.scale}")


def load_png(path) -> Image:
    with PILImage.open(path) as im:
        if im.mode in ("L", "LA", "I", "I;16", "1"):
            mode, channels = "L", 1
        else:
            mode, channels = "RGB", 3
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return Image(arr.reshape(arr.shape[0], arr.shape[1], channels))


def to_uint8(img: Image) -> np.ndarray:
    return np.round(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: Image) -> None:
    arr = to_uint8(img)
    if img.channels == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# bicubic


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_taps(in_size: int, out_size: int, antialias: bool = True):
    """Source indices and normalized weights, each of shape (out_size, taps).

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * in/out - 0.5``.
    When shrinking with ``antialias`` the kernel is stretched by the scale
    factor.  Indices beyond the edge are clamped.
    """
    scale = out_size / in_size
    stretch = min(scale, 1.0) if antialias else 1.0
    support = 2.0 / stretch
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    taps = int(math.ceil(2 * support)) + 1
    first = np.floor(centers - support).astype(np.int64) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centers[:, None] - idx) * stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, in_size - 1), weights


def _resample_axis(arr: np.ndarray, axis: int, out_size: int, antialias: bool) -> np.ndarray:
    idx, weights = resample_taps(arr.shape[axis], out_size, antialias)
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[idx]  # (out, taps, ...)
    anchor = gathered[:, :1]
    w = weights.reshape(weights.shape + (1,) * (moved.ndim - 1))
    # anchor + sum w * (x - anchor): exact on constant signals
    out = anchor[:, 0] + np.sum(w * (gathered - anchor), axis=1)
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: Image, out_w: int, out_h: int, antialias: bool = True) -> Image:
    """Separable cubic convolution (a = -0.5), edge clamped, clipped to [0, 1]."""
    if out_w < 1 or out_h < 1:
        raise ContractError(f"target size must be at least 1x1, got {out_w}x{out_h}")
    arr = img.pixels
    if out_h != img.height:
        arr = _resample_axis(arr, 0, out_h, antialias)
    if out_w != img.width:
        arr = _resample_axis(arr, 1, out_w, antialias)
    return Image(np.clip(arr, 0.0, 1.0))


def crop_multiple(scale: int) -> int:
    """HR sizes are cropped to multiples of this (scale and the hourglass factor 4)."""
    return math.lcm(scale, 4)


def make_ilr(hr: Image, spec: DegradationSpec, min_size: int | None = None):
    """Return ``(ilr, hr_cropped)``.

    HR is cropped from the top-left to a multiple of ``lcm(scale, 4)``, shrunk by
    ``scale`` and enlarged back to the cropped size.  ``min_size`` defaults to
    ``48 * scale`` so that the LR image holds at least one training patch.
    """
    s = spec.scale
    if min_size is None:
        min_size = PATCH_SIZE * s
    if hr.width < min_size or hr.height < min_size:
        raise ContractError(
            f"image {hr.width}x{hr.height} is smaller than the minimum {min_size}x{min_size} "
            f"for scale {s}"
        )
    m = crop_multiple(s)
    w, h = hr.width - hr.width % m, hr.height - hr.height % m
    if w == 0 or h == 0:
        raise ContractError(f"image {hr.width}x{hr.height} is smaller than the crop unit {m}")
    cropped = hr.crop(0, 0, w, h)
    lr = bicubic_resize(cropped, w // s, h // s)
    ilr = bicubic_resize(lr, w, h)
    return ilr, cropped


def rgb_to_luminance(img: Image) -> Image:
    if img.channels != 3:
        raise ContractError(f"expected an RGB image, got {img.channels} channel(s)")
    return Image((img.pixels @ LUMA)[:, :, None])


def to_single_channel(img: Image) -> Image:
    return img if img.channels == 1 else rgb_to_luminance(img)


# RGB <-> YCbCr (JPEG full-range, in [0, 1])
_TO_YCC = np.array(
    [[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]]
)
_FROM_YCC = np.linalg.inv(_TO_YCC)
_YCC_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_ycbcr(img: Image) -> Image:
    return Image(img.pixels @ _TO_YCC.T + _YCC_OFFSET)


def ycbcr_to_rgb(img: Image) -> Image:
    return Image(np.clip((img.pixels - _YCC_OFFSET) @ _FROM_YCC.T, 0.0, 1.0))


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class Patch:
    hr: Image
    ilr: Image
    source: str
    x: int
    y: int


@dataclass
class PatchSet:
    patches: list[Patch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)

    def extend(self, other: "PatchSet") -> None:
        self.patches.extend(other.patches)

    def arrays(self, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """(ILR, HR) stacks shaped (N, C, size, size) for the network."""
        if not self.patches:
            raise ContractError("patch set is empty")
        ilr = np.stack([p.ilr.pixels.transpose(2, 0, 1) for p in self.patches])
        hr = np.stack([p.hr.pixels.transpose(2, 0, 1) for p in self.patches])
        return ilr.astype(dtype), hr.astype(dtype)

    def manifest(self) -> str:
        return "".join(f"{p.source} {p.x} {p.y}\n" for p in self.patches)


def extract_patches(hr: Image, ilr: Image, size: int = PATCH_SIZE, source: str = "") -> PatchSet:
    """Non-overlapping ``size`` x ``size`` tiles from the top-left; partial tiles dropped."""
    if hr.pixels.shape != ilr.pixels.shape:
        raise ContractError(
            f"HR {hr.width}x{hr.height}x{hr.channels} and ILR "
            f"{ilr.width}x{ilr.height}x{ilr.channels} differ"
        )
    out = PatchSet()
    for y in range(0, hr.height - size + 1, size):
        for x in range(0, hr.width - size + 1, size):
            out.patches.append(
                Patch(hr.crop(x, y, size, size), ilr.crop(x, y, size, size), source, x, y)
            )
    return out


@dataclass(frozen=True)
class DatasetSplit:
    train_paths: tuple[str, ...]
    test_paths: tuple[str, ...]
    seed: int


def split_dataset(paths: Sequence, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle of the sorted paths; the first ``round(ratio * N)`` go to training."""
    if not 0 < ratio < 1:
        raise ContractError(f"ratio must be in (0, 1), got {ratio}")
    items = sorted(str(p) for p in paths)
    if not items:
        raise ContractError("cannot split an empty dataset")
    n_train = int(math.floor(ratio * len(items) + 0.5))
    order = np.random.default_rng(seed).permutation(len(items))
    train = tuple(items[i] for i in order[:n_train])
    test = tuple(items[i] for i in order[n_train:])
    return DatasetSplit(train, test, seed)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ContractError(f"not a readable directory: {directory}")
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() == ".png" and p.is_file())
