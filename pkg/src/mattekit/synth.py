"""Deterministic synthetic foreground/alpha/background generator.

Every sample is a pure function of (spec, seed), so datasets never need to
be shipped: the same seed list regenerates bit-identical imagery anywhere.
Subjects always carry solid, empty, and fractional alpha regions; the
stroke-bundle subject exists specifically to exercise thin-structure
refinement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from mattekit.image import AlphaMatte, Image, write_image, write_matte

SUBJECT_TYPES = ("blob", "strokes", "polygon")
BACKGROUND_TYPES = ("flat", "gradient", "texture", "checker")


def _check_weights(name, weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"{name} needs {n} entries, got {w.shape}")
    if (w < 0).any() or w.sum() == 0.0:
        raise ValueError(f"{name} must be nonnegative and not all zero")
    return tuple(float(v) for v in w)


@dataclass(frozen=True)
class SynthSpec:
    resolution: tuple = (160, 256)           # h and w each drawn from [lo, hi]
    subject_weights: tuple = (1.0, 1.0, 1.0)  # blob, strokes, polygon
    background_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # flat, gradient, texture, checker
    stroke_count: tuple = (8, 20)
    stroke_width: tuple = (0.7, 2.2)          # pixels
    stroke_opacity: tuple = (0.4, 1.0)

    def __post_init__(self):
        lo, hi = self.resolution
        if not (8 <= lo <= hi):
            raise ValueError(f"resolution range {self.resolution} invalid")
        object.__setattr__(
            self, "subject_weights",
            _check_weights("subject_weights", self.subject_weights, 3),
        )
        object.__setattr__(
            self, "background_weights",
            _check_weights("background_weights", self.background_weights, 4),
        )
        for name in ("stroke_count", "stroke_width", "stroke_opacity"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                raise ValueError(f"{name} range ({a}, {b}) invalid")

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "subject_weights": list(self.subject_weights),
            "background_weights": list(self.background_weights),
            "stroke_count": list(self.stroke_count),
            "stroke_width": list(self.stroke_width),
            "stroke_opacity": list(self.stroke_opacity),
        }


def _pick(rng, weights) -> int:
    w = np.asarray(weights, dtype=np.float64)
    return int(rng.choice(len(w), p=w / w.sum()))


def _coord_grids(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy, xx


def _color_field(rng, h, w, lo=0.08, hi=1.0) -> np.ndarray:
    """Smooth random color image, strictly positive everywhere."""
    base = rng.uniform(0.25, 0.85, size=(3, 1, 1))
    yy, xx = _coord_grids(h, w)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (yy * math.cos(theta) + xx * math.sin(theta)) / max(h, w)
    amp = rng.uniform(-0.25, 0.25, size=(3, 1, 1))
    coarse = rng.uniform(-0.15, 0.15, size=(3, 5, 5))
    wobble = np.stack([
        ndi.zoom(coarse[c], (h / 5.0, w / 5.0), order=1, mode="nearest",
                 grid_mode=True)
        for c in range(3)
    ])
    return np.clip(base + amp * ramp + wobble, lo, hi)


# ---------------------------------------------------------------------------
# Subjects
# ---------------------------------------------------------------------------

def _subject_blob(rng, h, w) -> np.ndarray:
    """Gaussian-bump mixture with a solid plateau and a soft rim."""
    yy, xx = _coord_grids(h, w)
    field = np.zeros((h, w))
    for _ in range(int(rng.integers(2, 5))):
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        sy = rng.uniform(0.08, 0.22) * h
        sx = rng.uniform(0.08, 0.22) * w
        field += np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    lo = rng.uniform(0.35, 0.5)
    hi = lo + rng.uniform(0.15, 0.3)
    return np.clip((field - lo) / (hi - lo), 0.0, 1.0)


def _stamp_stroke(canvas, points, width, opacity):
    """Max-composite a soft-edged tube of the given width along points."""
    h, w = canvas.shape
    r = int(math.ceil(width + 1.5))
    for py, px in points:
        y0, x0 = int(py) - r, int(px) - r
        y1, x1 = int(py) + r + 1, int(px) + r + 1
        ys, xs = max(y0, 0), max(x0, 0)
        ye, xe = min(y1, h), min(x1, w)
        if ys >= ye or xs >= xe:
            continue
        yy, xx = np.mgrid[ys:ye, xs:xe].astype(np.float64)
        d = np.hypot(yy - py, xx - px)
        dot = opacity * np.clip(width + 0.5 - d, 0.0, 1.0)
        np.maximum(canvas[ys:ye, xs:xe], dot, out=canvas[ys:ye, xs:xe])


def _subject_strokes(rng, h, w, spec: SynthSpec) -> np.ndarray:
    """Solid elliptical root with hair-like strands flowing outward."""
    yy, xx = _coord_grids(h, w)
    cy = rng.uniform(0.35 * h, 0.65 * h)
    cx = rng.uniform(0.35 * w, 0.65 * w)
    ry = rng.uniform(0.08, 0.16) * h
    rx = rng.uniform(0.08, 0.16) * w
    dist = np.hypot((yy - cy) / ry, (xx - cx) / rx)
    alpha = np.clip((1.25 - dist) / 0.25, 0.0, 1.0)  # plateau inside the ellipse

    n = int(rng.integers(spec.stroke_count[0], spec.stroke_count[1] + 1))
    reach = 0.45 * min(h, w)
    for _ in range(n):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        start = np.array([cy + 0.9 * ry * math.sin(theta),
                          cx + 0.9 * rx * math.cos(theta)])
        length = rng.uniform(0.4, 1.0) * reach
        mid = start + length * 0.5 * np.array([math.sin(theta), math.cos(theta)])
        mid += rng.normal(0.0, 0.08 * length, size=2)
        end = start + length * np.array([math.sin(theta), math.cos(theta)])
        end += rng.normal(0.0, 0.15 * length, size=2)
        t = np.linspace(0.0, 1.0, max(int(length * 2), 8))[:, None]
        pts = ((1 - t) ** 2) * start + 2 * t * (1 - t) * mid + (t**2) * end
        width = rng.uniform(*spec.stroke_width)
        opacity = rng.uniform(*spec.stroke_opacity)
        _stamp_stroke(alpha, pts, width, opacity)
    return np.clip(alpha, 0.0, 1.0)


def _subject_polygon(rng, h, w) -> np.ndarray:
    """Star-convex polygon filled solid, feathered over a random band."""
    k = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = rng.uniform(0.15, 0.38, size=k) * min(h, w)
    cy = rng.uniform(0.4 * h, 0.6 * h)
    cx = rng.uniform(0.4 * w, 0.6 * w)
    vy = cy + radii * np.sin(angles)
    vx = cx + radii * np.cos(angles)

    yy, xx = _coord_grids(h, w)
    # even-odd rule against each edge of the closed polygon
    crossings = np.zeros((h, w), dtype=np.int64)
    for i in range(k):
        y0, x0 = vy[i], vx[i]
        y1, x1 = vy[(i + 1) % k], vx[(i + 1) % k]
        if y0 == y1:
            continue
        cond = (yy >= min(y0, y1)) & (yy < max(y0, y1))
        xcross = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        crossings += (cond & (xx < xcross)).astype(np.int64)
    inside = crossings % 2 == 1
    if not inside.any():  # degenerate rasterization at tiny resolutions
        inside = np.hypot(yy - cy, xx - cx) <= 0.25 * min(h, w)

    feather = rng.uniform(1.5, 4.0)
    d_in = ndi.distance_transform_edt(inside)
    d_out = ndi.distance_transform_edt(~inside)
    signed = d_in - d_out
    return np.clip(0.5 + signed / (2.0 * feather), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Backgrounds
# ---------------------------------------------------------------------------

def _background(rng, h, w, spec: SynthSpec) -> np.ndarray:
    kind = BACKGROUND_TYPES[_pick(rng, spec.background_weights)]
    if kind == "flat":
        return np.broadcast_to(rng.uniform(0.05, 0.95, size=(3, 1, 1)),
                               (3, h, w)).copy()
    if kind == "gradient":
        c0 = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        c1 = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        yy, xx = _coord_grids(h, w)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        t = yy * math.cos(theta) + xx * math.sin(theta)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return c0 + (c1 - c0) * t
    if kind == "texture":
        # value noise: coarse random lattices blown up bilinearly
        out = np.zeros((3, h, w))
        amp = 1.0
        total = 0.0
        for cells in (3, 6, 12):
            lattice = rng.uniform(0.0, 1.0, size=(3, cells, cells))
            out += amp * np.stack([
                ndi.zoom(lattice[c], (h / cells, w / cells), order=1,
                         mode="nearest", grid_mode=True)
                for c in range(3)
            ])
            total += amp
            amp *= 0.5
        out /= total
        c0 = rng.uniform(0.0, 0.5, size=(3, 1, 1))
        c1 = rng.uniform(0.5, 1.0, size=(3, 1, 1))
        return c0 + (c1 - c0) * out
    # checker
    tile = int(rng.integers(8, 33))
    c0 = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    c1 = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    yy, xx = _coord_grids(h, w)
    par = ((yy // tile + xx // tile) % 2)[None]
    return np.where(par == 0, c0, c1)


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

def generate_sample(spec: SynthSpec, seed: int) -> tuple[Image, AlphaMatte, Image]:
    """Render one (foreground, alpha, background) triple from a seed."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.resolution
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))

    subject = SUBJECT_TYPES[_pick(rng, spec.subject_weights)]
    if subject == "blob":
        alpha = _subject_blob(rng, h, w)
    elif subject == "strokes":
        alpha = _subject_strokes(rng, h, w, spec)
    else:
        alpha = _subject_polygon(rng, h, w)

    fg = _color_field(rng, h, w)
    bg = np.clip(_background(rng, h, w, spec), 0.0, 1.0)
    return Image(fg), AlphaMatte(alpha), Image(bg)


def write_dataset(spec: SynthSpec, count: int, out_dir: str | Path,
                  base_seed: int = 0) -> dict:
    """Write fgr/, pha/, bgr/ PNG triples plus a manifest of seeds."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    for sub in ("fgr", "pha", "bgr"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seeds = [base_seed + i for i in range(count)]
    for i, seed in enumerate(seeds):
        fg, alpha, bg = generate_sample(spec, seed)
        name = f"{i:04d}.png"
        write_image(out / "fgr" / name, fg)
        write_matte(out / "pha" / name, alpha)
        write_image(out / "bgr" / name, bg)
    manifest = {"count": count, "seeds": seeds, "spec": spec.to_dict()}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
