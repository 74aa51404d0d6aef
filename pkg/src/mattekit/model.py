"""Full matting pipeline: coarse pass at 1/c, patch selection, refinement.

Training works on crops whose full resolution is divisible by 16*c; the
`infer` helper accepts arbitrary sizes by replicate-padding to that granule
and cropping the outputs back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from mattekit import ops
from mattekit.basenet import BaseNet, BaseNetConfig, BaseOutputs
from mattekit.image import AlphaMatte, ForegroundResidual, Image
from mattekit.params import (
    ParameterStore,
    load_checkpoint_into,
    save_checkpoint,
)
from mattekit.refiner import (
    PatchIndexSet,
    RefineConfig,
    Refiner,
    resample_error,
    select_patches,
)


@dataclass(frozen=True)
class ModelConfig:
    base: BaseNetConfig = BaseNetConfig()
    refine: RefineConfig = RefineConfig()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "refine": self.refine.to_dict(),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        base = d["base"]
        refine = d["refine"]
        return ModelConfig(
            base=BaseNetConfig(
                stage_channels=tuple(base["stage_channels"]),
                aspp_channels=base["aspp_channels"],
            ),
            refine=RefineConfig(
                c=refine["c"],
                k=refine["k"],
                selection_mode=refine["selection_mode"],
                tau=refine["tau"],
                kernel=refine["kernel"],
            ),
            seed=d.get("seed", 0),
        )


@dataclass
class ModelOutputs:
    alpha: np.ndarray       # (n, 1, H, W) in [0, 1]
    fgr: np.ndarray         # (n, 3, H, W) in [-1, 1]
    base: BaseOutputs       # coarse predictions at 1/c
    idx: PatchIndexSet      # refined cells


class MattingModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore()
        rng = np.random.default_rng(config.seed)
        self.base = BaseNet(config.base, self.store, rng, dtype=dtype)
        self.refiner = Refiner(config.refine, self.store, rng, dtype=dtype)
        self._cache: dict | None = None

    @property
    def granule(self) -> int:
        """Input dims must be multiples of this (coarse net needs /16 at 1/c)."""
        return 16 * self.config.refine.c

    # -- coarse-only path (stage-1 training) --------------------------------

    def forward_coarse(self, img: np.ndarray, bgr: np.ndarray, training: bool) -> BaseOutputs:
        cache: dict = {}
        img_c, bgr_c = self._downsample(img, bgr, cache)
        out = self.base.forward(img_c, bgr_c, training)
        self._cache = cache if training else None
        return out

    def backward_coarse(self, d_alpha_c, d_fgr_c, d_err_c, d_hid_c=None):
        cache = self._require_cache()
        if d_hid_c is None:
            n, _, hc, wc = d_alpha_c.shape
            d_hid_c = np.zeros((n, 32, hc, wc), dtype=d_alpha_c.dtype)
        d_img_c, d_bgr_c = self.base.backward(d_alpha_c, d_fgr_c, d_err_c, d_hid_c)
        return self._upstream_input_grads(cache, d_img_c, d_bgr_c)

    # -- full pipeline -------------------------------------------------------

    def forward(
        self,
        img: np.ndarray,
        bgr: np.ndarray,
        training: bool,
        k: int | None = None,
    ) -> ModelOutputs:
        n, _, full_h, full_w = img.shape
        cache: dict = {}
        img_c, bgr_c = self._downsample(img, bgr, cache)
        base_out = self.base.forward(img_c, bgr_c, training)
        e4 = resample_error(base_out.err, full_h, full_w)
        cfg = self.config.refine if k is None else dc_replace(self.config.refine, k=k)
        idx = select_patches(e4, cfg)
        alpha, fgr = self.refiner.forward(base_out, img, bgr, idx, training)
        self._cache = cache if training else None
        return ModelOutputs(alpha=alpha, fgr=fgr, base=base_out, idx=idx)

    def backward(
        self,
        d_alpha: np.ndarray,
        d_fgr: np.ndarray,
        d_alpha_c: np.ndarray | None = None,
        d_fgr_c: np.ndarray | None = None,
        d_err_c: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop refined-output grads plus optional direct coarse-loss grads."""
        cache = self._require_cache()
        da_c, df_c, dh_c, d_img_r, d_bgr_r = self.refiner.backward(d_alpha, d_fgr)
        if d_alpha_c is not None:
            da_c = da_c + d_alpha_c
        if d_fgr_c is not None:
            df_c = df_c + d_fgr_c
        if d_err_c is None:
            d_err_c = np.zeros_like(da_c)
        d_img_c, d_bgr_c = self.base.backward(da_c, df_c, d_err_c, dh_c)
        d_img, d_bgr = self._upstream_input_grads(cache, d_img_c, d_bgr_c)
        return d_img + d_img_r, d_bgr + d_bgr_r

    # -- helpers -------------------------------------------------------------

    def _downsample(self, img, bgr, cache):
        if img.shape != bgr.shape:
            raise ops.OpShapeError(f"image {img.shape} vs background {bgr.shape}")
        n, c, h, w = img.shape
        g = self.granule
        for name, dim in (("height", h), ("width", w)):
            if dim % g != 0:
                raise ops.OpShapeError(f"{name} {dim} not divisible by {g}")
        cc = self.config.refine.c
        img_c, cache["img_rs"] = ops.resize_forward(img, h // cc, w // cc)
        bgr_c, cache["bgr_rs"] = ops.resize_forward(bgr, h // cc, w // cc)
        return img_c, bgr_c

    def _upstream_input_grads(self, cache, d_img_c, d_bgr_c):
        d_img = ops.resize_backward(cache["img_rs"], d_img_c)
        d_bgr = ops.resize_backward(cache["bgr_rs"], d_bgr_c)
        return d_img, d_bgr

    def _require_cache(self) -> dict:
        if self._cache is None:
            raise RuntimeError("backward without a cached training forward")
        cache = self._cache
        self._cache = None
        return cache

    # -- user-facing inference ------------------------------------------------

    def infer(
        self, image: Image, background: Image, k: int | None = None
    ) -> tuple[AlphaMatte, ForegroundResidual]:
        """Run eval-mode matting on one image pair of arbitrary size."""
        img = image.data[None].astype(self.dtype)
        bgr = background.data[None].astype(self.dtype)
        if img.shape != bgr.shape:
            raise ops.OpShapeError(
                f"image {image.data.shape} vs background {background.data.shape}"
            )
        h, w = img.shape[2], img.shape[3]
        g = self.granule
        ph = (g - h % g) % g
        pw = (g - w % g) % g
        if ph or pw:
            img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
            bgr = np.pad(bgr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
        out = self.forward(img, bgr, training=False, k=k)
        alpha = out.alpha[0, 0, :h, :w]
        fgr = out.fgr[0, :, :h, :w]
        return AlphaMatte(alpha), ForegroundResidual(fgr)


def save_model(
    path: str | Path,
    model: MattingModel,
    rng: np.random.Generator | None = None,
    extra: dict | None = None,
) -> None:
    save_checkpoint(path, model.store, model.config.to_dict(), rng=rng, extra=extra)


def load_model(path: str | Path, dtype=np.float32) -> tuple[MattingModel, dict]:
    from mattekit.params import read_checkpoint

    meta, _ = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = MattingModel(config, dtype=dtype)
    meta = load_checkpoint_into(path, model.store, config.to_dict())
    return model, meta
