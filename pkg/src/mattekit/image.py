"""Image and matte value types, compositing arithmetic, and resampling.

All rasters are channel-major float arrays normalized to [0, 1] (mattes and
error maps) or [-1, 1] (foreground residuals).  8-bit and 16-bit PNG are
converted at the I/O boundary by dividing by the max code value.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when raster shapes do not satisfy an operation's contract."""


def _as_float(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite values")
    # Out-of-range inputs are clamped, not rejected, to tolerate file-format
    # rounding at the I/O boundary.
    return np.clip(arr, lo, hi)


@dataclass(frozen=True)
class Image:
    """RGB raster, shape (3, h, w), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float(self.data, 0.0, 1.0)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"Image expects (3, h, w), got {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ShapeError("Image must be at least 1x1")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class AlphaMatte:
    """Single-channel opacity raster, shape (h, w), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float(self.data, 0.0, 1.0)
        if arr.ndim != 2:
            raise ShapeError(f"AlphaMatte expects (h, w), got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


class ErrorMap(AlphaMatte):
    """Single-channel predicted-error raster, same contract as AlphaMatte."""


@dataclass(frozen=True)
class ForegroundResidual:
    """Difference of two [0,1] images, shape (3, h, w), values in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float(self.data, -1.0, 1.0)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"ForegroundResidual expects (3, h, w), got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


def composite(alpha: AlphaMatte, fg: Image, bg: Image) -> Image:
    """Blend foreground over background: out = alpha*fg + (1-alpha)*bg."""
    if (alpha.height, alpha.width) != (fg.height, fg.width) or fg.data.shape != bg.data.shape:
        raise ShapeError(
            f"composite shape mismatch: alpha {alpha.data.shape}, "
            f"fg {fg.data.shape}, bg {bg.data.shape}"
        )
    out = composite_arrays(alpha.data[None], fg.data, bg.data)
    return Image(out)


def composite_arrays(alpha: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Array-level blend; alpha broadcasts over the channel axis."""
    return alpha * fg + (1.0 - alpha) * bg


def recover_foreground(residual: ForegroundResidual, image: Image) -> Image:
    """Add a predicted residual back onto the input and clamp to [0, 1]."""
    if residual.data.shape != image.data.shape:
        raise ShapeError(
            f"recover_foreground shape mismatch: {residual.data.shape} vs {image.data.shape}"
        )
    return Image(np.clip(residual.data + image.data, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Resampling.  Half-pixel-center convention for both modes: output pixel t
# samples source coordinate (t + 0.5) * (n_in / n_out) - 0.5 (bilinear) or
# floor((t + 0.5) * (n_in / n_out)) (nearest).  No corner alignment.
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _axis_weights_cached(n_in: int, n_out: int, mode: str) -> np.ndarray:
    w = np.zeros((n_out, n_in), dtype=np.float64)
    t = np.arange(n_out, dtype=np.float64)
    if mode == "bilinear":
        s = np.clip((t + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
        i0 = np.floor(s).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = s - i0
        np.add.at(w, (np.arange(n_out), i0), 1.0 - f)
        np.add.at(w, (np.arange(n_out), i1), f)
    elif mode == "nearest":
        src = np.floor((t + 0.5) * (n_in / n_out)).astype(np.intp)
        np.clip(src, 0, n_in - 1, out=src)
        w[np.arange(n_out), src] = 1.0
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    w.flags.writeable = False
    return w


def resize_axis_matrix(n_in: int, n_out: int, mode: str, dtype=None) -> np.ndarray:
    """Row-stochastic (n_out, n_in) sampling matrix for one spatial axis."""
    w = _axis_weights_cached(int(n_in), int(n_out), mode)
    return w if dtype is None else w.astype(dtype)


def resize_array(src: np.ndarray, target_h: int, target_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resample the trailing two axes of ``src`` to (target_h, target_w)."""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"resize target must be >= 1, got ({target_h}, {target_w})")
    src = np.asarray(src)
    h, w = src.shape[-2], src.shape[-1]
    if (h, w) == (target_h, target_w):
        return src.copy()
    wh = resize_axis_matrix(h, target_h, mode, src.dtype)
    ww = resize_axis_matrix(w, target_w, mode, src.dtype)
    lead = src.shape[:-2]
    flat = src.reshape((-1, h, w))
    out = np.matmul(np.matmul(wh, flat), ww.T)
    return out.reshape(lead + (target_h, target_w))


def resize(src, target_h: int, target_w: int, mode: str = "bilinear"):
    """Resize a raster value or bare array; value types come back re-wrapped."""
    if isinstance(src, AlphaMatte):
        return type(src)(resize_array(src.data, target_h, target_w, mode))
    if isinstance(src, Image):
        return Image(resize_array(src.data, target_h, target_w, mode))
    if isinstance(src, ForegroundResidual):
        return ForegroundResidual(resize_array(src.data, target_h, target_w, mode))
    return resize_array(np.asarray(src), target_h, target_w, mode)


# ---------------------------------------------------------------------------
# PNG I/O.  Images are 8-bit RGB; mattes read 8- or 16-bit grayscale and are
# written as 16-bit grayscale to keep fractional alpha precision.
# ---------------------------------------------------------------------------

def read_image(path: str | Path) -> Image:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=DEFAULT_DTYPE) / 255.0
    return Image(arr.transpose(2, 0, 1))


def write_image(path: str | Path, image: Image) -> None:
    arr = np.rint(image.data * 255.0).astype(np.uint8).transpose(1, 2, 0)
    PILImage.fromarray(arr, mode="RGB").save(path)


def read_matte(path: str | Path) -> AlphaMatte:
    with PILImage.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return AlphaMatte(arr.astype(DEFAULT_DTYPE))


def write_matte(path: str | Path, matte: AlphaMatte, bit_depth: int = 16) -> None:
    if bit_depth == 16:
        arr = np.rint(matte.data.astype(np.float64) * 65535.0).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
    elif bit_depth == 8:
        arr = np.rint(matte.data * 255.0).astype(np.uint8)
        PILImage.fromarray(arr, mode="L").save(path)
    else:
        raise ValueError(f"unsupported matte bit depth {bit_depth}")
