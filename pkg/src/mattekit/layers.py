"""Parameter-owning layer wrappers around the functional primitives.

Layers register weights in a ParameterStore at construction and keep the
forward cache needed by their own backward pass.  Caches are only retained
when forward runs with training=True; backward consumes and clears them.
"""

from __future__ import annotations

import numpy as np

from mattekit import ops
from mattekit.params import Param, ParameterStore


def kaiming_conv_init(
    rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int, dtype
) -> np.ndarray:
    fan_in = in_ch * kernel * kernel
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)).astype(dtype)


class Conv2d:
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        group: str,
        in_ch: int,
        out_ch: int,
        kernel: int,
        dilation: int = 1,
        padding: str = "same",
        bias: bool = False,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        rng = rng or np.random.default_rng()
        self.dilation = dilation
        self.padding = padding
        self.weight: Param = store.create(
            f"{name}.weight", group, kaiming_conv_init(rng, out_ch, in_ch, kernel, dtype)
        )
        self.bias: Param | None = None
        if bias:
            self.bias = store.create(f"{name}.bias", group, np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        b = self.bias.value if self.bias is not None else None
        y, cache = ops.conv2d_forward(x, self.weight.value, b, self.padding, self.dilation)
        self._cache = cache if training else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward without a cached training forward")
        dx, dw, db = ops.conv2d_backward(self._cache, dy)
        self._cache = None
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm2d:
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        group: str,
        channels: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        dtype=np.float32,
    ):
        self.momentum = momentum
        self.eps = eps
        self.gamma: Param = store.create(f"{name}.gamma", group, np.ones(channels, dtype=dtype))
        self.beta: Param = store.create(f"{name}.beta", group, np.zeros(channels, dtype=dtype))
        self.running_mean = store.create_buffer(
            f"{name}.running_mean", np.zeros(channels, dtype=dtype)
        )
        self.running_var = store.create_buffer(
            f"{name}.running_var", np.ones(channels, dtype=dtype)
        )
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y, cache = ops.batchnorm2d_forward(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean,
            self.running_var,
            training,
            self.momentum,
            self.eps,
        )
        self._cache = cache if training else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward without a cached training forward")
        dx, dgamma, dbeta = ops.batchnorm2d_backward(self._cache, dy)
        self._cache = None
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ConvBNReLU:
    """Conv (no bias) + batch norm + ReLU, the repeated block of both nets."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        group: str,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        dilation: int = 1,
        padding: str = "same",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        self.conv = Conv2d(
            store, f"{name}.conv", group, in_ch, out_ch, kernel,
            dilation=dilation, padding=padding, bias=False, rng=rng, dtype=dtype,
        )
        self.bn = BatchNorm2d(store, f"{name}.bn", group, out_ch, dtype=dtype)
        self._relu_mask = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y = self.bn.forward(self.conv.forward(x, training), training)
        y, mask = ops.relu_forward(y)
        self._relu_mask = mask if training else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy = ops.relu_backward(self._relu_mask, dy)
        self._relu_mask = None
        return self.conv.backward(self.bn.backward(dy))
