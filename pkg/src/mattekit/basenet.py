"""Coarse matting network: 6-channel stem, stride-16 backbone, ASPP, decoder.

The input image and captured background are concatenated to 6 channels and
processed at 1/c scale.  The backbone downsamples through strides 2/4/8/16
(each stage is a bilinear 2x reduction followed by conv blocks; the deepest
stage uses dilation 2 so nothing ever reaches stride 32).  An ASPP block with
dilations 3/6/9 plus a pooled branch feeds a 4-block decoder that upsamples
back to stage skips and finally to the raw 6-channel input, emitting 37
channels: 1 alpha + 3 foreground residual + 1 predicted error + 32 hidden.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from mattekit import ops
from mattekit.layers import Conv2d, ConvBNReLU
from mattekit.params import ParameterStore


@dataclass(frozen=True)
class BaseNetConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    aspp_channels: int = 64

    ASPP_DILATIONS: ClassVar[tuple[int, int, int]] = (3, 6, 9)
    DECODER_CHANNELS: ClassVar[tuple[int, int, int]] = (128, 64, 48)
    HIDDEN_CHANNELS: ClassVar[int] = 32
    OUT_CHANNELS: ClassVar[int] = 37  # 1 + 3 + 1 + 32

    def __post_init__(self):
        chans = tuple(int(c) for c in self.stage_channels)
        if len(chans) != 4 or any(c < 1 for c in chans):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        object.__setattr__(self, "stage_channels", chans)
        if self.aspp_channels < 1:
            raise ValueError("aspp_channels must be positive")

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "aspp_channels": self.aspp_channels,
            "aspp_dilations": list(self.ASPP_DILATIONS),
            "decoder_channels": list(self.DECODER_CHANNELS),
            "hidden_channels": self.HIDDEN_CHANNELS,
        }


@dataclass
class BaseOutputs:
    """Coarse-scale predictions; alpha and err in [0,1], hid nonnegative."""

    alpha: np.ndarray  # (n, 1, h, w)
    fgr: np.ndarray    # (n, 3, h, w), unclamped residual
    err: np.ndarray    # (n, 1, h, w)
    hid: np.ndarray    # (n, 32, h, w)


def _concat(parts):
    return np.concatenate(parts, axis=1)


def _split_grad(dy, widths):
    out, at = [], 0
    for wd in widths:
        out.append(dy[:, at:at + wd])
        at += wd
    return out


class BaseNet:
    def __init__(
        self,
        config: BaseNetConfig,
        store: ParameterStore,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.config = config
        s0, s1, s2, s3 = config.stage_channels
        a = config.aspp_channels
        d1, d2, d3 = config.DECODER_CHANNELS

        def cbr(name, group, cin, cout, kernel=3, dilation=1):
            return ConvBNReLU(
                store, name, group, cin, cout, kernel=kernel,
                dilation=dilation, rng=rng, dtype=dtype,
            )

        self.stem = cbr("base.stem", "backbone", 6, s0)
        self.stage2 = [cbr("base.stage2.0", "backbone", s0, s1),
                       cbr("base.stage2.1", "backbone", s1, s1)]
        self.stage3 = [cbr("base.stage3.0", "backbone", s1, s2),
                       cbr("base.stage3.1", "backbone", s2, s2)]
        self.stage4 = [cbr("base.stage4.0", "backbone", s2, s3, dilation=2),
                       cbr("base.stage4.1", "backbone", s3, s3, dilation=2)]

        self.aspp_branches = [cbr("base.aspp.point", "aspp", s3, a, kernel=1)]
        for d in config.ASPP_DILATIONS:
            self.aspp_branches.append(cbr(f"base.aspp.dil{d}", "aspp", s3, a, dilation=d))
        self.aspp_pool = cbr("base.aspp.pool", "aspp", s3, a, kernel=1)
        self.aspp_project = cbr("base.aspp.project", "aspp", 5 * a, a, kernel=1)

        self.dec1 = cbr("base.dec1", "decoder", a + s2, d1)
        self.dec2 = cbr("base.dec2", "decoder", d1 + s1, d2)
        self.dec3 = cbr("base.dec3", "decoder", d2 + s0, d3)
        self.out_conv = Conv2d(
            store, "base.out", "decoder", d3 + 6, config.OUT_CHANNELS, 3,
            bias=True, rng=rng, dtype=dtype,
        )
        self._cache: dict | None = None

    # -- forward ------------------------------------------------------------

    def forward(
        self, img: np.ndarray, bgr: np.ndarray, training: bool, want_features: bool = False
    ):
        if img.shape != bgr.shape:
            raise ops.OpShapeError(f"image {img.shape} vs background {bgr.shape}")
        n, c, h, w = img.shape
        for name, dim in (("height", h), ("width", w)):
            if dim % 16 != 0:
                raise ops.OpShapeError(f"{name} {dim} not divisible by 16")

        cache: dict = {}
        x6 = _concat([img, bgr])

        t, cache["rs2"] = ops.resize_forward(x6, h // 2, w // 2)
        t0 = self.stem.forward(t, training)
        t, cache["rs4"] = ops.resize_forward(t0, h // 4, w // 4)
        t1 = self._run(self.stage2, t, training)
        t, cache["rs8"] = ops.resize_forward(t1, h // 8, w // 8)
        t2 = self._run(self.stage3, t, training)
        t, cache["rs16"] = ops.resize_forward(t2, h // 16, w // 16)
        t3 = self._run(self.stage4, t, training)

        asp = self._aspp_forward(t3, training, cache)

        d, cache["ru8"] = ops.resize_forward(asp, h // 8, w // 8)
        d = self.dec1.forward(_concat([d, t2]), training)
        d, cache["ru4"] = ops.resize_forward(d, h // 4, w // 4)
        d = self.dec2.forward(_concat([d, t1]), training)
        d, cache["ru2"] = ops.resize_forward(d, h // 2, w // 2)
        d = self.dec3.forward(_concat([d, t0]), training)
        d, cache["ru1"] = ops.resize_forward(d, h, w)
        out = self.out_conv.forward(_concat([d, x6]), training)

        raw_alpha, fgr, raw_err, raw_hid = (
            out[:, :1], out[:, 1:4], out[:, 4:5], out[:, 5:]
        )
        alpha, cache["alpha_mask"] = ops.clamp_forward(raw_alpha, 0.0, 1.0)
        err, cache["err_mask"] = ops.clamp_forward(raw_err, 0.0, 1.0)
        hid, cache["hid_mask"] = ops.relu_forward(raw_hid)

        if training:
            cache["skip_ch"] = [x.shape[1] for x in (t2, t1, t0)]
            self._cache = cache
        else:
            self._cache = None
        outputs = BaseOutputs(alpha=alpha, fgr=fgr, err=err, hid=hid)
        if want_features:
            return outputs, {"stride2": t0, "stride4": t1, "stride8": t2, "stride16": t3}
        return outputs

    def _run(self, blocks, x, training):
        for blk in blocks:
            x = blk.forward(x, training)
        return x

    def _aspp_forward(self, t3, training, cache):
        feats = [br.forward(t3, training) for br in self.aspp_branches]
        pooled, cache["gap"] = ops.global_avgpool_forward(t3)
        pooled = self.aspp_pool.forward(pooled, training)
        spread, cache["pool_rs"] = ops.resize_forward(
            pooled, t3.shape[2], t3.shape[3], mode="nearest"
        )
        feats.append(spread)
        return self.aspp_project.forward(_concat(feats), training)

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        d_alpha: np.ndarray,
        d_fgr: np.ndarray,
        d_err: np.ndarray,
        d_hid: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter grads; return grads on (img, bgr)."""
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward without a cached training forward")
        self._cache = None

        d_out = _concat([
            ops.clamp_backward(cache["alpha_mask"], d_alpha),
            d_fgr,
            ops.clamp_backward(cache["err_mask"], d_err),
            ops.relu_backward(cache["hid_mask"], d_hid),
        ])

        d = self.out_conv.backward(d_out)
        d, d_x6_tail = _split_grad(d, [d.shape[1] - 6, 6])
        d = ops.resize_backward(cache["ru1"], d)
        d = self.dec3.backward(d)
        d, d_t0_dec = _split_grad(d, [d.shape[1] - cache["skip_ch"][2], cache["skip_ch"][2]])
        d = ops.resize_backward(cache["ru2"], d)
        d = self.dec2.backward(d)
        d, d_t1_dec = _split_grad(d, [d.shape[1] - cache["skip_ch"][1], cache["skip_ch"][1]])
        d = ops.resize_backward(cache["ru4"], d)
        d = self.dec1.backward(d)
        d, d_t2_dec = _split_grad(d, [d.shape[1] - cache["skip_ch"][0], cache["skip_ch"][0]])
        d_asp = ops.resize_backward(cache["ru8"], d)

        d_t3 = self._aspp_backward(d_asp, cache)

        d = self._run_back(self.stage4, d_t3)
        d = ops.resize_backward(cache["rs16"], d) + d_t2_dec
        d = self._run_back(self.stage3, d)
        d = ops.resize_backward(cache["rs8"], d) + d_t1_dec
        d = self._run_back(self.stage2, d)
        d = ops.resize_backward(cache["rs4"], d) + d_t0_dec
        d = self.stem.backward(d)
        d_x6 = ops.resize_backward(cache["rs2"], d) + d_x6_tail

        return d_x6[:, :3], d_x6[:, 3:]

    def _run_back(self, blocks, dy):
        for blk in reversed(blocks):
            dy = blk.backward(dy)
        return dy

    def _aspp_backward(self, d_asp, cache):
        d_cat = self.aspp_project.backward(d_asp)
        a = self.config.aspp_channels
        parts = _split_grad(d_cat, [a] * 5)
        d_t3 = None
        for br, dpart in zip(self.aspp_branches, parts[:4]):
            db = br.backward(dpart)
            d_t3 = db if d_t3 is None else d_t3 + db
        d_pool = ops.resize_backward(cache["pool_rs"], parts[4])
        d_pool = self.aspp_pool.backward(d_pool)
        d_t3 += ops.global_avgpool_backward(cache["gap"], d_pool)
        return d_t3
