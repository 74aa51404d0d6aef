"""Dataset access and training-batch assembly.

A dataset exposes indexed foreground/alpha samples and backgrounds; the two
lists may have different lengths and are paired cyclically per epoch.
Batches share one crop size so samples stack into dense arrays.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mattekit.augment import AugmentConfig, Sample, augment_sample
from mattekit.image import read_image, read_matte
from mattekit.synth import SynthSpec, generate_sample


class DatasetError(ValueError):
    """Raised when a dataset is missing, empty, or malformed."""


class SyntheticDataset:
    """Procedural dataset: sample i and background j are pure seed functions."""

    def __init__(self, spec: SynthSpec, n_samples: int,
                 n_backgrounds: int | None = None, base_seed: int = 0,
                 cache: bool = True):
        if n_samples < 1:
            raise DatasetError("need at least one sample")
        self.spec = spec
        self.n_samples = n_samples
        self.n_backgrounds = n_samples if n_backgrounds is None else n_backgrounds
        if self.n_backgrounds < 1:
            raise DatasetError("need at least one background")
        self.base_seed = base_seed
        self._cache: dict | None = {} if cache else None

    def _generate(self, seed: int):
        if self._cache is not None and seed in self._cache:
            return self._cache[seed]
        triple = generate_sample(self.spec, seed)
        if self._cache is not None:
            self._cache[seed] = triple
        return triple

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        fg, alpha, _ = self._generate(self.base_seed + i % self.n_samples)
        return fg.data, alpha.data

    def background(self, j: int) -> np.ndarray:
        # backgrounds draw from a disjoint seed block so they never mirror
        # the subject imagery they get composited under
        seed = self.base_seed + self.n_samples + j % self.n_backgrounds
        return self._generate(seed)[2].data


class DirectoryDataset:
    """fgr/ pha/ bgr/ PNG triples on disk, matched by file name."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        fgr_dir, pha_dir, bgr_dir = (self.root / s for s in ("fgr", "pha", "bgr"))
        for d in (fgr_dir, pha_dir, bgr_dir):
            if not d.is_dir():
                raise DatasetError(f"dataset directory {d} missing")
        pha_names = {p.name for p in pha_dir.iterdir()}
        self.sample_names = []
        for p in sorted(fgr_dir.iterdir()):
            if p.name in pha_names:
                self.sample_names.append(p.name)
            else:
                warnings.warn(f"skipping {p.name}: no matching matte",
                              RuntimeWarning, stacklevel=2)
        self.background_names = sorted(p.name for p in bgr_dir.iterdir())
        if not self.sample_names:
            raise DatasetError(f"no matched fgr/pha pairs under {self.root}")
        if not self.background_names:
            raise DatasetError(f"no backgrounds under {bgr_dir}")

    @property
    def n_samples(self) -> int:
        return len(self.sample_names)

    @property
    def n_backgrounds(self) -> int:
        return len(self.background_names)

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        name = self.sample_names[i % self.n_samples]
        fg = read_image(self.root / "fgr" / name)
        alpha = read_matte(self.root / "pha" / name)
        return fg.data, alpha.data

    def background(self, j: int) -> np.ndarray:
        name = self.background_names[j % self.n_backgrounds]
        return read_image(self.root / "bgr" / name).data


@dataclass
class TrainBatch:
    img: np.ndarray       # (n, 3, s, s)
    bgr: np.ndarray       # (n, 3, s, s)
    gt_alpha: np.ndarray  # (n, 1, s, s)
    gt_fgr: np.ndarray    # (n, 3, s, s)
    samples: list[Sample]


def _snap_down(value: int, multiple: int) -> int:
    return value - value % multiple


def batch_crop_size(rng: np.random.Generator, cfg: AugmentConfig,
                    limit: int, multiple: int) -> int:
    """One shared crop edge for a batch: drawn from the config range, snapped
    to the network granule, clamped to the smallest source in the batch."""
    lo, hi = cfg.crop_range
    s = int(rng.integers(lo, hi + 1))
    s = min(_snap_down(s, multiple), _snap_down(limit, multiple))
    if s < multiple:
        raise DatasetError(
            f"sources of size {limit} cannot fit a {multiple}-aligned crop"
        )
    return s


def make_batch(dataset, pairs: list[tuple[int, int]], cfg: AugmentConfig,
               rng: np.random.Generator, multiple: int = 1) -> TrainBatch:
    """Augment the given (sample, background) pairs into one stacked batch."""
    if not pairs:
        raise DatasetError("empty batch")
    raw = [(dataset.sample(i), dataset.background(j)) for i, j in pairs]
    limit = min(
        min(min(fg.shape[-2:]) for (fg, _), _ in raw),
        min(min(bg.shape[-2:]) for _, bg in raw),
    )
    s = batch_crop_size(rng, cfg, limit, multiple)
    cfg_s = dataclasses.replace(cfg, crop_range=(s, s), crop_multiple=1)
    samples = [
        augment_sample(fg, alpha, bg, cfg_s, rng)
        for (fg, alpha), bg in raw
    ]
    return TrainBatch(
        img=np.stack([x.image for x in samples]),
        bgr=np.stack([x.bgr for x in samples]),
        gt_alpha=np.stack([x.gt_alpha for x in samples]),
        gt_fgr=np.stack([x.gt_fgr for x in samples]),
        samples=samples,
    )
