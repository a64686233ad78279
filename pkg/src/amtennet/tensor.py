"""Dense 4-D tensor type and parameter blocks used by every layer.

Activations travel through the network as `Tensor` objects (a data array
plus a lazily allocated gradient buffer of the same shape).  Learnable
state lives in `Param` blocks, which pair the value array with gradient
and momentum buffers so the optimizer can update them in place.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense (n, c, h, w) array with an optional paired gradient buffer."""

    __slots__ = ("data", "_grad")

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor expects a 4-D (n, c, h, w) array, got shape {arr.shape}")
        self.data = arr
        self._grad = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Gradient buffer, allocated (zeroed) on first access."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray):
        value = np.asarray(value)
        if value.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {value.shape} does not match tensor shape {self.data.shape}"
            )
        self._grad = value

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != self.data.dtype:
            return self.data.astype(dtype)
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Param:
    """A named learnable array with paired gradient and momentum buffers.

    `trainable=False` marks fixed state (e.g. hand-set filter banks or
    batch-norm running statistics): its gradient stays zero and the
    optimizer never touches it, but it is still checkpointed by name.
    """

    __slots__ = ("name", "value", "grad", "velocity", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


SUPPORTED_KERNELS = (1, 3, 5)


class ConvParams:
    """Kernels + bias for one convolution, with stride/padding geometry."""

    def __init__(
        self,
        name: str,
        kernels: np.ndarray,
        bias: np.ndarray | None,
        stride: int = 1,
        padding: int = 0,
        trainable: bool = True,
    ):
        kernels = np.asarray(kernels)
        if kernels.ndim != 4:
            raise ShapeError(f"{name}: kernels must be (out, in, kh, kw), got {kernels.shape}")
        out_ch, in_ch, kh, kw = kernels.shape
        if kh != kw or kh not in SUPPORTED_KERNELS:
            raise ShapeError(f"{name}: kernel must be square with size in {SUPPORTED_KERNELS}, got {kh}x{kw}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"{name}: stride must be >= 1 and padding >= 0")
        self.name = name
        self.kernels = Param(f"{name}.kernels", kernels, trainable=trainable)
        self.bias = None
        if bias is not None:
            bias = np.asarray(bias)
            if bias.shape != (out_ch,):
                raise ShapeError(f"{name}: bias shape {bias.shape} != ({out_ch},)")
            self.bias = Param(f"{name}.bias", bias, trainable=trainable)
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.kernels.value.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.value.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.value.shape[2]

    def params(self) -> list[Param]:
        return [self.kernels] if self.bias is None else [self.kernels, self.bias]


def he_conv(
    name: str,
    in_ch: int,
    out_ch: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: int = 0,
    bias: bool = True,
    dtype=DEFAULT_DTYPE,
) -> ConvParams:
    """Random conv block: zero-mean Gaussian with variance 2/fan_in, zero bias."""
    fan_in = in_ch * kernel * kernel
    k = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype) if bias else None
    return ConvParams(name, k, b, stride=stride, padding=padding)


class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    Running stats are non-trainable `Param`s so they are checkpointed by
    name alongside the learnable blocks but skipped by the optimizer.
    """

    def __init__(self, name: str, channels: int, epsilon: float = 1e-5, momentum: float = 0.9, dtype=DEFAULT_DTYPE):
        if not 0.0 < momentum < 1.0:
            raise ShapeError(f"{name}: running-stat momentum must be in (0, 1), got {momentum}")
        self.name = name
        self.scale = Param(f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = Param(f"{name}.shift", np.zeros(channels, dtype=dtype))
        self.running_mean = Param(f"{name}.running_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Param(f"{name}.running_var", np.ones(channels, dtype=dtype), trainable=False)
        self.epsilon = epsilon
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.scale.value.shape[0]

    def params(self) -> list[Param]:
        return [self.scale, self.shift, self.running_mean, self.running_var]
