"""Differentiable array primitives with hand-derived backward passes.

Every primitive is a pair of pure functions: ``*_forward(...) -> (y, cache)``
and ``*_backward(cache, dy) -> grads``.  Activations are plain float arrays
in (n, c, h, w) layout.  Convolution lowers to an im2col matrix product so
both directions run on BLAS; the input gradient of a stride-1 convolution is
itself a convolution with the flipped, channel-transposed kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mattekit.image import resize_array, resize_axis_matrix


class OpShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise OpShapeError(f"{name} must be 4D (n, c, h, w), got {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int, dilation: int):
    """Lower padded sliding windows to a (n*oh*ow, cin*kh*kw) matrix."""
    n, cin, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    oh = x.shape[2] - eff_h + 1
    ow = x.shape[3] - eff_w + 1
    if oh < 1 or ow < 1:
        raise OpShapeError(
            f"conv input {h}x{w} too small for kernel {kh}x{kw} "
            f"dilation {dilation} pad {pad}"
        )
    win = sliding_window_view(x, (eff_h, eff_w), axis=(2, 3))
    win = win[..., ::dilation, ::dilation]  # (n, cin, oh, ow, kh, kw)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    padding: str = "same",
    dilation: int = 1,
):
    """Stride-1 cross-correlation; padding is 'same' (zeros) or 'valid'."""
    _check_4d(x, "conv input")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise OpShapeError(f"conv expects {cin} input channels, got {x.shape[1]}")
    if padding == "same":
        pad = same_padding(kh, dilation)
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n = x.shape[0]
    col, oh, ow = _im2col(x, kh, kw, pad, dilation)
    y = col @ weight.reshape(cout, -1).T
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias[:, None, None]
    cache = (col, x.shape, weight, bias is not None, pad, dilation)
    return np.ascontiguousarray(y), cache


def conv2d_backward(cache, dy: np.ndarray):
    """Return (dx, dweight, dbias); dbias is None for bias-free convs."""
    col, x_shape, weight, has_bias, pad, dilation = cache
    cout, cin, kh, kw = weight.shape
    n, _, h, w = x_shape
    dy = np.ascontiguousarray(dy)
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)

    dweight = (dy_flat.T @ col).reshape(weight.shape)
    dbias = dy.sum(axis=(0, 2, 3)) if has_bias else None

    # dx is the correlation of dy with the flipped kernel, channels swapped,
    # padded so the output recovers the input extent.
    w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    back_pad = dilation * (kh - 1) - pad
    col_b, bh, bw = _im2col(dy, kh, kw, back_pad, dilation)
    if (bh, bw) != (h, w):
        raise OpShapeError(f"conv backward produced {bh}x{bw}, expected {h}x{w}")
    dx = col_b @ np.ascontiguousarray(w_flip.reshape(cin, -1).T)
    dx = dx.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dweight, dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel normalization; train mode mutates the running buffers."""
    _check_4d(x, "batchnorm input")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise OpShapeError("batchnorm requires a non-empty batch")
    g = gamma[:, None, None]
    b = beta[:, None, None]
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = n * h * w
        # running buffers keep the unbiased estimate
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        cache = ("train", xhat, inv_std, gamma)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[:, None, None]) * inv_std[:, None, None]
        cache = ("eval", xhat, inv_std, gamma)
    return xhat * g + b, cache


def batchnorm2d_backward(cache, dy: np.ndarray):
    """Return (dx, dgamma, dbeta)."""
    mode, xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    gi = (gamma * inv_std)[:, None, None]
    if mode == "eval":
        return dy * gi, dgamma, dbeta
    n, c, h, w = dy.shape
    m = n * h * w
    dx = (gi / m) * (m * dy - dbeta[:, None, None] - xhat * dgamma[:, None, None])
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Pointwise and shape primitives
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


def clamp_forward(x: np.ndarray, lo: float, hi: float):
    y = np.clip(x, lo, hi)
    mask = (x >= lo) & (x <= hi)
    return y, mask


def clamp_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


def resize_forward(x: np.ndarray, target_h: int, target_w: int, mode: str = "bilinear"):
    y = resize_array(x, target_h, target_w, mode)
    return y, (x.shape, target_h, target_w, mode)


def resize_backward(cache, dy: np.ndarray) -> np.ndarray:
    x_shape, th, tw, mode = cache
    h, w = x_shape[-2], x_shape[-1]
    if (h, w) == (th, tw):
        return dy.copy()
    # y = Wh x Ww^T per trailing plane, so dx = Wh^T dy Ww
    wh = resize_axis_matrix(h, th, mode, dy.dtype)
    ww = resize_axis_matrix(w, tw, mode, dy.dtype)
    flat = dy.reshape((-1, th, tw))
    dx = np.matmul(np.matmul(wh.T, flat), ww)
    return dx.reshape(x_shape)


def global_avgpool_forward(x: np.ndarray):
    _check_4d(x, "avgpool input")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avgpool_backward(x_shape, dy: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def assert_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")
