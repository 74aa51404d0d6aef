"""Error-guided patch selection and two-stage patch refinement.

The coarse error map is resampled to a 1/4-resolution grid; each grid cell
names one 4x4 full-resolution patch.  The k most error-prone cells are
gathered, refined through valid convolutions at half then full resolution,
and scattered back over the bilinearly upsampled coarse prediction.

Crop geometry (3x3 kernel mode): cell (i, j) reads half-scale rows
[2i-3, 2i+5) and full-scale rows [4i-2, 4i+6), with replicate padding at
borders.  Two valid 3x3 convs shrink 8 -> 6 -> 4; nearest 2x of that 4x4
core covers exactly the full-scale 8x8 window, whose own 4x4 core is the
target cell [4i, 4i+4).  In 1x1 kernel mode nothing shrinks, so the crops
are the center windows themselves: 2x2 at half scale, 4x4 at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mattekit import ops
from mattekit.basenet import BaseOutputs
from mattekit.layers import Conv2d, ConvBNReLU
from mattekit.params import ParameterStore

# scale -> (window, pad, stride) per kernel mode
CROP_GEOMETRY = {
    3: {"half": (8, 3, 2), "full": (8, 2, 4)},
    1: {"half": (2, 0, 2), "full": (4, 0, 4)},
}

# patches per conv chunk on the no-backward path, to bound im2col scratch
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class RefineConfig:
    c: int = 4
    k: int = 5000
    selection_mode: str = "top_k"
    tau: float = 0.1
    kernel: int = 3

    def __post_init__(self):
        if self.c not in (4, 8):
            raise ValueError(f"coarse scale c must be 4 or 8, got {self.c}")
        if self.k < 0:
            raise ValueError("patch budget k must be >= 0")
        if self.selection_mode not in ("top_k", "threshold"):
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("threshold tau must be in [0, 1]")
        if self.kernel not in (3, 1):
            raise ValueError(f"refinement kernel must be 3 or 1, got {self.kernel}")

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "k": self.k,
            "selection_mode": self.selection_mode,
            "tau": self.tau,
            "kernel": self.kernel,
        }


@dataclass(frozen=True)
class PatchIndexSet:
    """Selected refinement cells as (batch, row, col) rows, shape (k, 3)."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.intp).reshape(-1, 3)
        if arr.size and arr.min() < 0:
            raise ValueError("negative patch index")
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def validate_grid(self, n: int, rows: int, cols: int) -> None:
        e = self.entries
        if e.size == 0:
            return
        if e[:, 0].max() >= n or e[:, 1].max() >= rows or e[:, 2].max() >= cols:
            raise ops.OpShapeError(
                f"patch index outside {n}x{rows}x{cols} grid "
                f"(max {tuple(e.max(axis=0))})"
            )


def resample_error(err_c: np.ndarray, full_h: int, full_w: int) -> np.ndarray:
    """Bring a 1/c error map to the 1/4-resolution selection grid."""
    if full_h % 4 or full_w % 4:
        raise ops.OpShapeError(
            f"full resolution {full_h}x{full_w} not divisible by 4"
        )
    th, tw = full_h // 4, full_w // 4
    h, w = err_c.shape[-2], err_c.shape[-1]
    if (h, w) == (th, tw):
        return err_c
    if (h * 2, w * 2) != (th, tw):
        raise ops.OpShapeError(
            f"error map {h}x{w} is neither 1/4 nor 1/8 of {full_h}x{full_w}"
        )
    y, _ = ops.resize_forward(err_c, th, tw)
    return y


def select_patches(e4: np.ndarray, cfg: RefineConfig) -> PatchIndexSet:
    """Pick refinement cells over the whole batch jointly.

    top_k keeps the min(k, cells) highest-error cells; threshold keeps every
    cell with error > tau.  Order: descending error, ties broken by
    (batch, row, col) row-major.
    """
    if e4.ndim == 4:
        e4 = e4[:, 0]
    n, rows, cols = e4.shape
    err = e4.reshape(-1)
    b, r, c = np.unravel_index(np.arange(err.size), (n, rows, cols))
    order = np.lexsort((c, r, b, -err))
    if cfg.selection_mode == "top_k":
        take = order[: min(cfg.k, err.size)]
    else:
        take = order[err[order] > cfg.tau]
    return PatchIndexSet(np.stack([b[take], r[take], c[take]], axis=1))


# ---------------------------------------------------------------------------
# Crop / replace
# ---------------------------------------------------------------------------

def _replicate_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def crop_patches(
    x: np.ndarray, idx: PatchIndexSet, scale: str, kernel: int = 3
) -> np.ndarray:
    """Gather one window per selected cell from a (n, c, h, w) tensor."""
    window, pad, stride = CROP_GEOMETRY[kernel][scale]
    n, ch, h, w = x.shape
    idx.validate_grid(n, h // stride, w // stride)
    if idx.k == 0:
        return np.zeros((0, ch, window, window), dtype=x.dtype)
    xp = _replicate_pad(x, pad)
    view = sliding_window_view(xp, (window, window), axis=(2, 3))
    e = idx.entries
    return np.ascontiguousarray(view[e[:, 0], :, stride * e[:, 1], stride * e[:, 2]])


def crop_patches_backward(
    d_patches: np.ndarray, idx: PatchIndexSet, x_shape, scale: str, kernel: int = 3
) -> np.ndarray:
    """Scatter-add patch gradients back to the source tensor (overlaps sum)."""
    window, pad, stride = CROP_GEOMETRY[kernel][scale]
    n, ch, h, w = x_shape
    acc = np.zeros((n, h + 2 * pad, w + 2 * pad, ch), dtype=d_patches.dtype)
    e = idx.entries
    if e.size:
        span = np.arange(window)
        rows = (stride * e[:, 1])[:, None, None] + span[None, :, None]
        cols = (stride * e[:, 2])[:, None, None] + span[None, None, :]
        batch = e[:, 0][:, None, None]
        np.add.at(acc, (batch, rows, cols), d_patches.transpose(0, 2, 3, 1))
    if pad:
        acc[:, pad] += acc[:, :pad].sum(axis=1)
        acc[:, -pad - 1] += acc[:, -pad:].sum(axis=1)
        acc = acc[:, pad:-pad]
        acc[:, :, pad] += acc[:, :, :pad].sum(axis=2)
        acc[:, :, -pad - 1] += acc[:, :, -pad:].sum(axis=2)
        acc = acc[:, :, pad:-pad]
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def replace_patches(
    coarse_up: np.ndarray, refined: np.ndarray, idx: PatchIndexSet
) -> np.ndarray:
    """Overwrite the selected 4x4 cells of an upsampled coarse raster."""
    if refined.shape[0] != idx.k:
        raise ops.OpShapeError(
            f"{refined.shape[0]} refined patches for {idx.k} selected cells"
        )
    out = coarse_up.copy()
    if idx.k == 0:
        return out
    n, ch, h, w = coarse_up.shape
    idx.validate_grid(n, h // 4, w // 4)
    e = idx.entries
    span = np.arange(4)
    rows = (4 * e[:, 1])[:, None, None] + span[None, :, None]
    cols = (4 * e[:, 2])[:, None, None] + span[None, None, :]
    out_cl = out.transpose(0, 2, 3, 1)
    out_cl[e[:, 0][:, None, None], rows, cols] = refined.transpose(0, 2, 3, 1)
    return np.ascontiguousarray(out_cl.transpose(0, 3, 1, 2))


def replace_patches_backward(
    dy: np.ndarray, idx: PatchIndexSet, refined_channels: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split output gradient into (d_coarse_up, d_refined)."""
    d_coarse = dy.copy()
    if idx.k == 0:
        return d_coarse, np.zeros((0, refined_channels, 4, 4), dtype=dy.dtype)
    e = idx.entries
    span = np.arange(4)
    rows = (4 * e[:, 1])[:, None, None] + span[None, :, None]
    cols = (4 * e[:, 2])[:, None, None] + span[None, None, :]
    batch = e[:, 0][:, None, None]
    dy_cl = dy.transpose(0, 2, 3, 1)
    d_refined = dy_cl[batch, rows, cols].transpose(0, 3, 1, 2)
    d_coarse_cl = d_coarse.transpose(0, 2, 3, 1)
    d_coarse_cl[batch, rows, cols] = 0.0
    return d_coarse, np.ascontiguousarray(d_refined)


# ---------------------------------------------------------------------------
# Refinement network
# ---------------------------------------------------------------------------

class Refiner:
    """Two-stage patch network: 42 -> 24 -> 16 at half scale, then 22 -> 12 -> 4."""

    STAGE1_CHANNELS = (24, 16)
    STAGE2_CHANNELS = (12,)
    IN_CHANNELS = 42  # 1 alpha + 3 residual + 32 hidden + 3 image + 3 background

    def __init__(
        self,
        cfg: RefineConfig,
        store: ParameterStore,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.cfg = cfg
        kern = cfg.kernel
        c1, c2 = self.STAGE1_CHANNELS
        (c3,) = self.STAGE2_CHANNELS
        self.block1 = ConvBNReLU(
            store, "refine.block1", "refiner", self.IN_CHANNELS, c1,
            kernel=kern, padding="valid", rng=rng, dtype=dtype,
        )
        self.block2 = ConvBNReLU(
            store, "refine.block2", "refiner", c1, c2,
            kernel=kern, padding="valid", rng=rng, dtype=dtype,
        )
        self.block3 = ConvBNReLU(
            store, "refine.block3", "refiner", c2 + 6, c3,
            kernel=kern, padding="valid", rng=rng, dtype=dtype,
        )
        self.out_conv = Conv2d(
            store, "refine.out", "refiner", c3, 4, kern,
            padding="valid", bias=True, rng=rng, dtype=dtype,
        )
        self._cache: dict | None = None

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        base_out: BaseOutputs,
        img: np.ndarray,
        bgr: np.ndarray,
        idx: PatchIndexSet,
        training: bool,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return full-resolution (alpha, fgr), refined on the selected cells."""
        n, _, full_h, full_w = img.shape
        if full_h % 4 or full_w % 4:
            raise ops.OpShapeError(f"full resolution {full_h}x{full_w} not divisible by 4")
        hc, wc = base_out.alpha.shape[-2:]
        if (hc * self.cfg.c, wc * self.cfg.c) != (full_h, full_w):
            raise ops.OpShapeError(
                f"coarse {hc}x{wc} is not 1/{self.cfg.c} of {full_h}x{full_w}"
            )
        idx.validate_grid(n, full_h // 4, full_w // 4)

        cache: dict = {"idx": idx, "full_shape": img.shape}
        hh, hw = full_h // 2, full_w // 2

        alpha_up, cache["alpha_rs"] = ops.resize_forward(base_out.alpha, full_h, full_w)
        fgr_up, cache["fgr_rs"] = ops.resize_forward(base_out.fgr, full_h, full_w)

        if idx.k == 0:
            alpha_out, cache["alpha_mask"] = ops.clamp_forward(alpha_up, 0.0, 1.0)
            fgr_out, cache["fgr_mask"] = ops.clamp_forward(fgr_up, -1.0, 1.0)
            self._cache = cache if training else None
            return alpha_out, fgr_out

        alpha_h, cache["alpha_h_rs"] = ops.resize_forward(base_out.alpha, hh, hw)
        fgr_h, cache["fgr_h_rs"] = ops.resize_forward(base_out.fgr, hh, hw)
        hid_h, cache["hid_h_rs"] = ops.resize_forward(base_out.hid, hh, hw)
        img_h, cache["img_h_rs"] = ops.resize_forward(img, hh, hw)
        bgr_h, cache["bgr_h_rs"] = ops.resize_forward(bgr, hh, hw)
        cat_h = np.concatenate([alpha_h, fgr_h, hid_h, img_h, bgr_h], axis=1)
        cache["half_shape"] = cat_h.shape

        kern = self.cfg.kernel
        patches = crop_patches(cat_h, idx, "half", kern)
        z = self._stage1(patches, training)
        up, cache["up_rs"] = ops.resize_forward(
            z, z.shape[2] * 2, z.shape[3] * 2, mode="nearest"
        )
        full6 = np.concatenate([img, bgr], axis=1)
        full_crops = crop_patches(full6, idx, "full", kern)
        z2 = np.concatenate([up, full_crops], axis=1)
        cache["stage2_split"] = up.shape[1]
        refined = self._stage2(z2, training)

        alpha_full = replace_patches(alpha_up, refined[:, :1], idx)
        fgr_full = replace_patches(fgr_up, refined[:, 1:], idx)
        alpha_out, cache["alpha_mask"] = ops.clamp_forward(alpha_full, 0.0, 1.0)
        fgr_out, cache["fgr_mask"] = ops.clamp_forward(fgr_full, -1.0, 1.0)

        self._cache = cache if training else None
        return alpha_out, fgr_out

    def _stage1(self, patches: np.ndarray, training: bool) -> np.ndarray:
        if training:
            return self.block2.forward(self.block1.forward(patches, True), True)
        return self._chunked(patches, lambda p: self.block2.forward(
            self.block1.forward(p, False), False))

    def _stage2(self, z2: np.ndarray, training: bool) -> np.ndarray:
        if training:
            return self.out_conv.forward(self.block3.forward(z2, True), True)
        return self._chunked(z2, lambda p: self.out_conv.forward(
            self.block3.forward(p, False), False))

    @staticmethod
    def _chunked(patches: np.ndarray, fn) -> np.ndarray:
        # eval-mode batch norm is per-sample, so chunking cannot change results
        if patches.shape[0] <= EVAL_CHUNK:
            return fn(patches)
        outs = [fn(patches[i:i + EVAL_CHUNK]) for i in range(0, patches.shape[0], EVAL_CHUNK)]
        return np.concatenate(outs, axis=0)

    # -- backward -----------------------------------------------------------

    def backward(
        self, d_alpha: np.ndarray, d_fgr: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (d_alpha_c, d_fgr_c, d_hid_c, d_img, d_bgr).

        The error map receives no gradient: it only steers the
        non-differentiable cell selection.
        """
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward without a cached training forward")
        self._cache = None
        idx: PatchIndexSet = cache["idx"]

        d_alpha = ops.clamp_backward(cache["alpha_mask"], d_alpha)
        d_fgr = ops.clamp_backward(cache["fgr_mask"], d_fgr)

        if idx.k == 0:
            d_alpha_c = ops.resize_backward(cache["alpha_rs"], d_alpha)
            d_fgr_c = ops.resize_backward(cache["fgr_rs"], d_fgr)
            n, _, hc, wc = d_alpha_c.shape
            d_hid_c = np.zeros((n, 32, hc, wc), dtype=d_alpha.dtype)
            zero_img = np.zeros(cache["full_shape"], dtype=d_alpha.dtype)
            return d_alpha_c, d_fgr_c, d_hid_c, zero_img, zero_img.copy()

        d_alpha_up, d_alpha_patch = replace_patches_backward(d_alpha, idx, 1)
        d_fgr_up, d_fgr_patch = replace_patches_backward(d_fgr, idx, 3)
        d_refined = np.concatenate([d_alpha_patch, d_fgr_patch], axis=1)

        d_z2 = self.block3.backward(self.out_conv.backward(d_refined))
        split = cache["stage2_split"]
        d_up, d_full_crops = d_z2[:, :split], d_z2[:, split:]

        kern = self.cfg.kernel
        d_full6 = crop_patches_backward(
            d_full_crops, idx, (cache["full_shape"][0], 6) + cache["full_shape"][2:],
            "full", kern,
        )
        d_img_full, d_bgr_full = d_full6[:, :3], d_full6[:, 3:]

        d_z = ops.resize_backward(cache["up_rs"], d_up)
        d_patches = self.block1.backward(self.block2.backward(d_z))
        d_cat_h = crop_patches_backward(d_patches, idx, cache["half_shape"], "half", kern)

        d_alpha_h = d_cat_h[:, 0:1]
        d_fgr_h = d_cat_h[:, 1:4]
        d_hid_h = d_cat_h[:, 4:36]
        d_img_h = d_cat_h[:, 36:39]
        d_bgr_h = d_cat_h[:, 39:42]

        d_alpha_c = ops.resize_backward(cache["alpha_rs"], d_alpha_up)
        d_alpha_c += ops.resize_backward(cache["alpha_h_rs"], d_alpha_h)
        d_fgr_c = ops.resize_backward(cache["fgr_rs"], d_fgr_up)
        d_fgr_c += ops.resize_backward(cache["fgr_h_rs"], d_fgr_h)
        d_hid_c = ops.resize_backward(cache["hid_h_rs"], d_hid_h)
        d_img = ops.resize_backward(cache["img_h_rs"], d_img_h) + d_img_full
        d_bgr = ops.resize_backward(cache["bgr_h_rs"], d_bgr_h) + d_bgr_full
        return d_alpha_c, d_fgr_c, d_hid_c, d_img, d_bgr
