"""Training objectives for the coarse and refinement stages.

All reductions are means, so loss magnitudes are resolution-invariant and
random-crop training sees comparable scales across crop sizes.  The error
loss regresses the predicted error map onto |alpha - alpha*| with the
predicted alpha treated as a constant: supervision flows into the error
head only, never back into the matte through its own target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mattekit import ops
from mattekit.basenet import BaseOutputs

# horizontal response kernel; vertical is its transpose
_SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_W = np.stack([_SOBEL_H, _SOBEL_H.T])[:, None]  # (2, 1, 3, 3)


def _check_match(name_a, a, name_b, b):
    if a.shape != b.shape:
        raise ops.OpShapeError(f"{name_a} {a.shape} vs {name_b} {b.shape}")


def _sobel_forward(alpha: np.ndarray):
    xp = np.pad(alpha, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    return ops.conv2d_forward(xp, _SOBEL_W.astype(alpha.dtype), padding="valid")


def _sobel_backward(cache, dy: np.ndarray) -> np.ndarray:
    dxp = ops.conv2d_backward(cache, dy)[0]
    dxp[:, :, 1] += dxp[:, :, 0]
    dxp[:, :, -2] += dxp[:, :, -1]
    dxp = dxp[:, :, 1:-1]
    dxp[:, :, :, 1] += dxp[:, :, :, 0]
    dxp[:, :, :, -2] += dxp[:, :, :, -1]
    return np.ascontiguousarray(dxp[:, :, :, 1:-1])


def sobel_gradient(alpha: np.ndarray) -> np.ndarray:
    """Horizontal and vertical Sobel responses of an (n, 1, h, w) matte batch."""
    return _sobel_forward(alpha)[0]


def loss_alpha(alpha: np.ndarray, alpha_star: np.ndarray) -> float:
    """Mean L1 on the matte plus mean L1 on its Sobel gradients."""
    return loss_alpha_grad(alpha, alpha_star)[0]


def loss_alpha_grad(alpha: np.ndarray, alpha_star: np.ndarray):
    _check_match("alpha", alpha, "alpha_star", alpha_star)
    diff = alpha - alpha_star
    g, g_cache = _sobel_forward(alpha)
    g_star = sobel_gradient(alpha_star)
    g_diff = g - g_star
    loss = float(np.abs(diff).mean() + np.abs(g_diff).mean())
    d = np.sign(diff) / diff.size
    d += _sobel_backward(g_cache, np.sign(g_diff) / g_diff.size)
    return loss, d


def loss_foreground(fgr: np.ndarray, fgr_star: np.ndarray, alpha_star: np.ndarray) -> float:
    """L1 on foreground colors, restricted to pixels where alpha* > 0."""
    return loss_foreground_grad(fgr, fgr_star, alpha_star)[0]


def loss_foreground_grad(fgr: np.ndarray, fgr_star: np.ndarray, alpha_star: np.ndarray):
    _check_match("fgr", fgr, "fgr_star", fgr_star)
    if alpha_star.shape[-2:] != fgr.shape[-2:] or alpha_star.shape[0] != fgr.shape[0]:
        raise ops.OpShapeError(f"alpha_star {alpha_star.shape} vs fgr {fgr.shape}")
    mask = alpha_star > 0.0
    count = int(mask.sum()) * fgr.shape[1]
    if count == 0:
        return 0.0, np.zeros_like(fgr)
    diff = (fgr - fgr_star) * mask
    loss = float(np.abs(diff).sum() / count)
    return loss, np.sign(diff) / count


def loss_error(err: np.ndarray, alpha: np.ndarray, alpha_star: np.ndarray) -> float:
    """MSE between the predicted error map and |alpha - alpha*|."""
    return loss_error_grad(err, alpha, alpha_star)[0]


def loss_error_grad(err: np.ndarray, alpha: np.ndarray, alpha_star: np.ndarray):
    # the target is a constant: no gradient w.r.t. alpha, ever
    _check_match("err", err, "alpha", alpha)
    _check_match("alpha", alpha, "alpha_star", alpha_star)
    diff = err - np.abs(alpha - alpha_star)
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


@dataclass(frozen=True)
class LossValues:
    l_alpha: float      # refined matte term (0 in base_only mode)
    l_fgr: float        # refined foreground term (0 in base_only mode)
    l_err: float        # coarse error-map term
    l_alpha_c: float
    l_fgr_c: float
    l_base: float       # l_alpha_c + l_fgr_c + l_err
    l_refine: float     # l_alpha + l_fgr
    total: float


@dataclass(frozen=True)
class LossGrads:
    d_alpha: np.ndarray | None      # w.r.t. refined alpha
    d_fgr: np.ndarray | None        # w.r.t. refined foreground residual
    d_alpha_c: np.ndarray
    d_fgr_c: np.ndarray             # w.r.t. coarse foreground residual
    d_err_c: np.ndarray


def compute_losses(
    base_out: BaseOutputs,
    refined_alpha: np.ndarray | None,
    refined_fgr: np.ndarray | None,
    image: np.ndarray,
    gt_alpha: np.ndarray,
    gt_fgr: np.ndarray,
    mode: str,
    c: int,
) -> LossValues:
    return compute_loss_gradients(
        base_out, refined_alpha, refined_fgr, image, gt_alpha, gt_fgr, mode, c
    )[0]


def compute_loss_gradients(
    base_out: BaseOutputs,
    refined_alpha: np.ndarray | None,
    refined_fgr: np.ndarray | None,
    image: np.ndarray,
    gt_alpha: np.ndarray,
    gt_fgr: np.ndarray,
    mode: str,
    c: int,
) -> tuple[LossValues, LossGrads]:
    """Evaluate the stage objective and its gradients w.r.t. all predictions.

    Coarse supervision targets are bilinear 1/c downsamples of the
    full-resolution ground truth; predicted foregrounds are recovered from
    residuals (clamped residual + image) before the foreground term.
    """
    if mode not in ("base_only", "joint"):
        raise ValueError(f"unknown loss mode {mode!r}")
    n, _, full_h, full_w = image.shape
    if gt_alpha.shape != (n, 1, full_h, full_w):
        raise ops.OpShapeError(f"gt_alpha {gt_alpha.shape} for image {image.shape}")
    if gt_fgr.shape != image.shape:
        raise ops.OpShapeError(f"gt_fgr {gt_fgr.shape} for image {image.shape}")
    if full_h % c or full_w % c:
        raise ops.OpShapeError(f"resolution {full_h}x{full_w} not divisible by {c}")
    hc, wc = full_h // c, full_w // c

    alpha_star_c, _ = ops.resize_forward(gt_alpha, hc, wc)
    fgr_star_c, _ = ops.resize_forward(gt_fgr, hc, wc)
    image_c, _ = ops.resize_forward(image, hc, wc)

    l_alpha_c, d_alpha_c = loss_alpha_grad(base_out.alpha, alpha_star_c)
    fgr_c, fgr_c_mask = ops.clamp_forward(base_out.fgr + image_c, 0.0, 1.0)
    l_fgr_c, d_fc = loss_foreground_grad(fgr_c, fgr_star_c, alpha_star_c)
    d_fgr_c = ops.clamp_backward(fgr_c_mask, d_fc)
    l_err, d_err_c = loss_error_grad(base_out.err, base_out.alpha, alpha_star_c)
    l_base = l_alpha_c + l_fgr_c + l_err

    if mode == "base_only":
        values = LossValues(
            l_alpha=0.0, l_fgr=0.0, l_err=l_err,
            l_alpha_c=l_alpha_c, l_fgr_c=l_fgr_c,
            l_base=l_base, l_refine=0.0, total=l_base,
        )
        return values, LossGrads(None, None, d_alpha_c, d_fgr_c, d_err_c)

    if refined_alpha is None or refined_fgr is None:
        raise ValueError("joint mode needs refined predictions")
    l_alpha_v, d_alpha = loss_alpha_grad(refined_alpha, gt_alpha)
    fgr_full, fgr_mask = ops.clamp_forward(refined_fgr + image, 0.0, 1.0)
    l_fgr_v, d_f = loss_foreground_grad(fgr_full, gt_fgr, gt_alpha)
    d_fgr = ops.clamp_backward(fgr_mask, d_f)
    l_refine = l_alpha_v + l_fgr_v
    values = LossValues(
        l_alpha=l_alpha_v, l_fgr=l_fgr_v, l_err=l_err,
        l_alpha_c=l_alpha_c, l_fgr_c=l_fgr_c,
        l_base=l_base, l_refine=l_refine, total=l_base + l_refine,
    )
    return values, LossGrads(d_alpha, d_fgr, d_alpha_c, d_fgr_c, d_err_c)
