"""Training-time sample composition and test-time background perturbation.

Foreground and alpha travel through one jointly sampled transform so the
matte stays registered to the subject; the background gets its own draw.
Misalignment perturbs only the background copy handed to the network, never
the one used for compositing, so the composite identity
I = alpha * F + (1 - alpha) * B stays exact on the clean diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage as ndi

from mattekit import ops
from mattekit.image import Image

# luma-preserving chroma plane; hue jitter rotates (i, q)
_RGB_TO_YIQ = np.array([
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def _check_range(name, pair):
    if pair[0] > pair[1]:
        raise ValueError(f"{name} range {pair} has lo > hi")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be a probability, got {p}")


@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 5.0            # degrees, +/-
    scale: tuple = (0.3, 1.0)
    translation: float = 0.10        # fraction of each dimension, +/-
    shear: float = 5.0               # degrees, +/-
    brightness: tuple = (0.85, 1.15)
    contrast: tuple = (0.85, 1.15)
    saturation: tuple = (0.85, 1.15)
    hue: float = 0.05                # fraction of a full hue turn, +/-
    noise_var_max: float = 0.03
    blur: bool = True
    sharpen: bool = True
    filter_prob: float = 0.3         # chance of each enabled blur/sharpen pass
    misalign_prob: float = 0.3
    misalign_rotation: float = 1.0
    misalign_translation: float = 0.01
    misalign_color: tuple = (0.82, 1.18)
    misalign_hue: float = 0.1
    shadow_prob: float = 0.3
    crop_range: tuple = (128, 256)
    crop_multiple: int = 1           # crop dims snap to this (network granule)

    def __post_init__(self):
        for name in ("scale", "brightness", "contrast", "saturation",
                     "misalign_color", "crop_range"):
            _check_range(name, getattr(self, name))
        for name in ("filter_prob", "misalign_prob", "shadow_prob"):
            _check_prob(name, getattr(self, name))
        if self.crop_multiple < 1:
            raise ValueError("crop_multiple must be >= 1")

    @classmethod
    def identity(cls, crop_range=(128, 256), crop_multiple=1) -> "AugmentConfig":
        """All ranges zeroed and probabilities 0: augmentation is a no-op."""
        return cls(
            rotation=0.0, scale=(1.0, 1.0), translation=0.0, shear=0.0,
            brightness=(1.0, 1.0), contrast=(1.0, 1.0), saturation=(1.0, 1.0),
            hue=0.0, noise_var_max=0.0, blur=False, sharpen=False,
            filter_prob=0.0, misalign_prob=0.0, misalign_rotation=0.0,
            misalign_translation=0.0, misalign_color=(1.0, 1.0),
            misalign_hue=0.0, shadow_prob=0.0,
            crop_range=crop_range, crop_multiple=crop_multiple,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation, "scale": list(self.scale),
            "translation": self.translation, "shear": self.shear,
            "brightness": list(self.brightness), "contrast": list(self.contrast),
            "saturation": list(self.saturation), "hue": self.hue,
            "noise_var_max": self.noise_var_max, "blur": self.blur,
            "sharpen": self.sharpen, "filter_prob": self.filter_prob,
            "misalign_prob": self.misalign_prob,
            "misalign_rotation": self.misalign_rotation,
            "misalign_translation": self.misalign_translation,
            "misalign_color": list(self.misalign_color),
            "misalign_hue": self.misalign_hue,
            "shadow_prob": self.shadow_prob,
            "crop_range": list(self.crop_range),
            "crop_multiple": self.crop_multiple,
        }


@dataclass
class Sample:
    """One augmented training example plus clean compositing diagnostics."""

    image: np.ndarray        # (3, h, w) network input, post shadow
    bgr: np.ndarray          # (3, h, w) network input, post misalignment
    gt_alpha: np.ndarray     # (1, h, w)
    gt_fgr: np.ndarray       # (3, h, w) ground-truth foreground colors
    bg_clean: np.ndarray     # background actually used for compositing
    image_clean: np.ndarray  # exact composite, pre shadow
    misaligned: bool
    shadowed: bool
    seed: int | None = None


def zip_epoch(n_samples: int, n_backgrounds: int) -> list[tuple[int, int]]:
    """Pair samples and backgrounds cyclically until the longer list is spent."""
    if n_samples < 1 or n_backgrounds < 1:
        raise ValueError("need at least one sample and one background")
    n = max(n_samples, n_backgrounds)
    return [(i % n_samples, i % n_backgrounds) for i in range(n)]


# ---------------------------------------------------------------------------
# Geometric and photometric primitives
# ---------------------------------------------------------------------------

def _sample_affine(rng, rotation, scale, translation, shear, h, w):
    theta = math.radians(rng.uniform(-rotation, rotation))
    s = rng.uniform(*scale)
    sh = math.tan(math.radians(rng.uniform(-shear, shear)))
    ty = rng.uniform(-translation, translation) * h
    tx = rng.uniform(-translation, translation) * w
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shear_m = np.array([[1.0, 0.0], [sh, 1.0]])
    fwd = rot @ shear_m * s
    return fwd, np.array([ty, tx])


def _is_identity(fwd, trans):
    return np.allclose(fwd, np.eye(2), atol=0.0) and not trans.any()


def _apply_affine(x: np.ndarray, fwd: np.ndarray, trans: np.ndarray,
                  mode: str, cval: float = 0.0) -> np.ndarray:
    """Warp (ch, h, w) by the forward map: rotate/shear/scale about the
    center, then translate."""
    if _is_identity(fwd, trans):
        return x.copy()
    h, w = x.shape[-2:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(fwd)
    offset = center - inv @ (center + trans)
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        out[ch] = ndi.affine_transform(
            x[ch], inv, offset=offset, order=1, mode=mode, cval=cval
        )
    return out


def _hue_rotate(x: np.ndarray, turns: float) -> np.ndarray:
    theta = 2.0 * math.pi * turns
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    m = _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ
    return np.einsum("ij,jhw->ihw", m, x)


def _color_jitter(x: np.ndarray, rng, brightness, contrast, saturation, hue) -> np.ndarray:
    # fixed sub-op order: brightness, contrast, saturation, hue
    b = rng.uniform(*brightness)
    c = rng.uniform(*contrast)
    s = rng.uniform(*saturation)
    t = rng.uniform(-hue, hue)
    if b != 1.0:
        x = x * b
    if c != 1.0:
        gray_mean = np.tensordot(_RGB_TO_YIQ[0], x, axes=1).mean()
        x = (x - gray_mean) * c + gray_mean
    if s != 1.0:
        gray = np.tensordot(_RGB_TO_YIQ[0], x, axes=1)
        x = gray + (x - gray) * s
    if t != 0.0:
        x = _hue_rotate(x, t)
    return np.clip(x, 0.0, 1.0)


def _photometric(x: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    x = _color_jitter(x, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    var = rng.uniform(0.0, cfg.noise_var_max)
    if var > 0.0:
        x = x + rng.normal(0.0, math.sqrt(var), size=x.shape)
    if cfg.blur and rng.random() < cfg.filter_prob:
        radius = int(rng.integers(1, 3))
        x = ndi.uniform_filter(x, size=(1, 2 * radius + 1, 2 * radius + 1),
                               mode="nearest")
    if cfg.sharpen and rng.random() < cfg.filter_prob:
        amount = rng.uniform(0.0, 0.5)
        blurred = ndi.uniform_filter(x, size=(1, 3, 3), mode="nearest")
        x = x + amount * (x - blurred)
    return np.clip(x, 0.0, 1.0)


def _sample_crop(rng, cfg: AugmentConfig, limit_h: int, limit_w: int) -> tuple[int, int]:
    lo, hi = cfg.crop_range
    m = cfg.crop_multiple
    for _ in range(10):
        ch = int(rng.integers(lo, hi + 1))
        cw = int(rng.integers(lo, hi + 1))
        ch -= ch % m
        cw -= cw % m
        if m <= ch <= limit_h and m <= cw <= limit_w:
            return ch, cw
    # fall back to the largest feasible multiple
    ch = max(min(limit_h, hi) // m * m, m)
    cw = max(min(limit_w, hi) // m * m, m)
    if ch > limit_h or cw > limit_w:
        raise ValueError(
            f"source {limit_h}x{limit_w} cannot fit a crop multiple of {m}"
        )
    return ch, cw


def _crop(x: np.ndarray, top: int, left: int, ch: int, cw: int) -> np.ndarray:
    return x[..., top:top + ch, left:left + cw].copy()


# ---------------------------------------------------------------------------
# Sample assembly
# ---------------------------------------------------------------------------

def augment_sample(
    fg: np.ndarray,
    alpha: np.ndarray,
    bg: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Sample:
    """Build one training example: transform, crop, composite, perturb.

    fg/alpha share one transform draw; bg gets an independent one.  If the
    sampled crop exceeds a source, the crop is redrawn (10 tries) and then
    clamped to the largest feasible size.
    """
    if fg.ndim != 3 or fg.shape[0] != 3 or bg.ndim != 3 or bg.shape[0] != 3:
        raise ops.OpShapeError(
            f"fg and bg must be (3, h, w), got {fg.shape} and {bg.shape}"
        )
    if fg.shape[-2:] != alpha.shape[-2:]:
        raise ops.OpShapeError(f"fg {fg.shape} vs alpha {alpha.shape}")
    if alpha.ndim == 2:
        alpha = alpha[None]

    fwd, trans = _sample_affine(
        rng, cfg.rotation, cfg.scale, cfg.translation, cfg.shear, *fg.shape[-2:]
    )
    fg_t = _apply_affine(fg, fwd, trans, mode="constant", cval=0.0)
    alpha_t = _apply_affine(alpha, fwd, trans, mode="constant", cval=0.0)
    fg_t = _photometric(fg_t, cfg, rng)

    bg_fwd, bg_trans = _sample_affine(
        rng, cfg.rotation, cfg.scale, cfg.translation, cfg.shear, *bg.shape[-2:]
    )
    bg_t = _apply_affine(bg, bg_fwd, bg_trans, mode="nearest")
    bg_t = _photometric(bg_t, cfg, rng)

    ch, cw = _sample_crop(
        rng, cfg,
        min(fg_t.shape[-2], bg_t.shape[-2]),
        min(fg_t.shape[-1], bg_t.shape[-1]),
    )
    top = int(rng.integers(0, fg_t.shape[-2] - ch + 1))
    left = int(rng.integers(0, fg_t.shape[-1] - cw + 1))
    fg_c = _crop(fg_t, top, left, ch, cw)
    alpha_c = np.clip(_crop(alpha_t, top, left, ch, cw), 0.0, 1.0)
    top = int(rng.integers(0, bg_t.shape[-2] - ch + 1))
    left = int(rng.integers(0, bg_t.shape[-1] - cw + 1))
    bg_c = _crop(bg_t, top, left, ch, cw)

    image = alpha_c * fg_c + (1.0 - alpha_c) * bg_c

    misaligned = rng.random() < cfg.misalign_prob
    bgr_net = bg_c
    if misaligned:
        m_fwd, m_trans = _sample_affine(
            rng, cfg.misalign_rotation, (1.0, 1.0), cfg.misalign_translation,
            0.0, ch, cw,
        )
        bgr_net = _apply_affine(bg_c, m_fwd, m_trans, mode="nearest")
        bgr_net = _color_jitter(
            bgr_net, rng, cfg.misalign_color, cfg.misalign_color,
            cfg.misalign_color, cfg.misalign_hue,
        )

    shadowed = rng.random() < cfg.shadow_prob
    final = shadow_augment(image, alpha_c[0], rng) if shadowed else image

    return Sample(
        image=final.copy(), bgr=bgr_net.copy(),
        gt_alpha=alpha_c, gt_fgr=fg_c,
        bg_clean=bg_c.copy(), image_clean=image.copy(),
        misaligned=misaligned, shadowed=shadowed, seed=seed,
    )


def shadow_augment(
    image: np.ndarray,
    alpha: np.ndarray,
    rng: np.random.Generator,
    strength: float | None = None,
    offset_frac: float = 0.05,
    blur_frac: float = 0.01,
) -> np.ndarray:
    """Darken the image behind the subject along its displaced contour."""
    if image.shape[-2:] != alpha.shape:
        raise ops.OpShapeError(f"image {image.shape} vs alpha {alpha.shape}")
    h, w = alpha.shape
    dy = int(round(rng.uniform(-offset_frac, offset_frac) * h))
    dx = int(round(rng.uniform(-offset_frac, offset_frac) * w))
    if strength is None:
        strength = rng.uniform(0.3, 0.7)
    shifted = np.zeros_like(alpha)
    ys, yd = (dy, None) if dy >= 0 else (0, dy)
    src = alpha[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    shifted[max(dy, 0):h - max(-dy, 0), max(dx, 0):w - max(-dx, 0)] = src
    radius = max(1, round(blur_frac * min(h, w)))
    mask = ndi.uniform_filter(shifted, size=2 * radius + 1, mode="nearest")
    mask = mask * (alpha < 0.5)  # shadows fall where the subject is not
    return np.clip(image * (1.0 - strength * mask), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Test-time background perturbation
# ---------------------------------------------------------------------------

def perturb_background_arrays(
    bgr: np.ndarray,
    rng: np.random.Generator,
    shift: float = 0.3,
    gamma: tuple = (0.85, 1.15),
    noise_mu: float = 0.02,
    noise_var: tuple = (0.08, 0.15),
) -> np.ndarray:
    """Subpixel shift, gamma, then additive gaussian noise, unclipped.

    The raw result is kept unclipped so noise moments stay measurable; the
    image-level wrapper clips into [0, 1].
    """
    out = np.asarray(bgr, dtype=np.float64)
    dy = rng.uniform(-shift, shift)
    dx = rng.uniform(-shift, shift)
    if dy != 0.0 or dx != 0.0:
        out = np.stack([
            ndi.shift(out[c], (dy, dx), order=1, mode="nearest")
            for c in range(out.shape[0])
        ])
    g = rng.uniform(*gamma)
    if g != 1.0:
        out = np.clip(out, 0.0, 1.0) ** g
    var = rng.uniform(*noise_var)
    if var > 0.0 or noise_mu != 0.0:
        mu = noise_mu if rng.random() < 0.5 else -noise_mu
        out = out + rng.normal(mu, math.sqrt(var), size=out.shape)
    return out


def perturb_background_for_test(background: Image, rng: np.random.Generator,
                                **kwargs) -> Image:
    return Image(np.clip(perturb_background_arrays(background.data, rng, **kwargs),
                         0.0, 1.0))
