"""Differentiable layer primitives: forward passes with exact analytic backward.

Every layer caches what its backward pass needs during forward, so the
calling pattern is strictly forward-then-backward per step.  Layers are
pure functions of (input, parameters); parameter mutation is left to the
optimizer.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import BatchNormParams, ConvParams, Param, Tensor


def conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_out_dim(size: int, kernel: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        return math.ceil((size - kernel) / stride) + 1
    return (size - kernel) // stride + 1


class Layer:
    """Minimal layer protocol. Subclasses fill in forward/backward/plan."""

    name: str

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def plan(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        """Compute the (c, h, w) output shape without running data."""
        raise NotImplementedError

    def spec_row(self) -> dict | None:
        """Row metadata for the shape-plan table (None for invisible layers)."""
        return None


class Conv2d(Layer):
    """2-D convolution (cross-correlation) over (n, c, h, w) tensors.

    The stride-1 path (every conv in this architecture) runs as k*k
    shifted GEMMs over a flat view of the padded input: for each kernel
    tap the needed elements form one contiguous slice, so no window
    tensor is ever materialized.  The flat buffer carries k-1 scratch
    elements at the end because the last tap's slice overruns the final
    row; the overrun columns land outside the cropped output (forward)
    and receive only zero-padded gradient (backward), so they never leak
    into results.  Strided convolutions fall back to an explicit window
    view contracted with tensordot.
    """

    def __init__(self, name: str, p: ConvParams):
        self.name = name
        self.p = p
        self._cache = None

    def params(self) -> list[Param]:
        return self.p.params()

    def plan(self, shape):
        c, h, w = shape
        p = self.p
        if c != p.in_channels:
            raise ShapeError(
                f"{self.name}: input shape (c={c}, h={h}, w={w}) does not match "
                f"kernels {p.kernels.value.shape}"
            )
        oh = conv_out_dim(h, p.kernel_size, p.stride, p.padding)
        ow = conv_out_dim(w, p.kernel_size, p.stride, p.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"{self.name}: spatial size {h}x{w} too small for kernel "
                f"{p.kernel_size} with padding {p.padding}"
            )
        return (p.out_channels, oh, ow)

    def spec_row(self):
        p = self.p
        return {"layer": self.name, "kernel": p.kernel_size, "count": p.out_channels, "stride": p.stride}

    def _pad(self, data: np.ndarray) -> np.ndarray:
        pad = self.p.padding
        return np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else data

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        p = self.p
        n, c, h, w = x.shape
        _, oh, ow = self.plan((c, h, w))  # shape validation with diagnostics
        k, s = p.kernel_size, p.stride
        if s == 1:
            hp, wp = h + 2 * p.padding, w + 2 * p.padding
            xf = np.zeros((n, c, hp * wp + k - 1), dtype=x.dtype)
            xf[:, :, : hp * wp] = self._pad(x.data).reshape(n, c, -1)
            out = np.zeros((n, p.out_channels, oh, ow), dtype=x.dtype)
            span = oh * wp
            buf = np.empty((n, p.out_channels, span), dtype=x.dtype)
            kernels = p.kernels.value
            for kh in range(k):
                for kw in range(k):
                    tap = np.ascontiguousarray(kernels[:, :, kh, kw])
                    np.matmul(tap, xf[:, :, kh * wp + kw : kh * wp + kw + span], out=buf)
                    out += buf.reshape(n, p.out_channels, oh, wp)[:, :, :, :ow]
            self._cache = ("flat", xf, (n, c, h, w), (hp, wp))
        else:
            xp = self._pad(x.data)
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            out = np.tensordot(win, p.kernels.value, axes=((1, 4, 5), (1, 2, 3)))
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
            self._cache = ("windowed", xp, (n, c, h, w), None)
        if p.bias is not None:
            out += p.bias.value[None, :, None, None]
        return Tensor(out)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        mode, stored, (n, c, h, w), geom = self._cache
        if mode == "flat":
            return self._backward_flat(out_grad, stored, (n, c, h, w), geom)
        return self._backward_windowed(out_grad, stored, (n, c, h, w))

    def _backward_flat(self, out_grad, xf, in_shape, geom):
        n, c, h, w = in_shape
        hp, wp = geom
        p = self.p
        k, pad = p.kernel_size, p.padding
        oh, ow = out_grad.shape[2], out_grad.shape[3]
        span = oh * wp
        gw = np.zeros((n, out_grad.shape[1], oh, wp), dtype=out_grad.dtype)
        gw[:, :, :, :ow] = out_grad
        gwf = gw.reshape(n, out_grad.shape[1], span)
        if p.bias is not None and p.bias.trainable:
            p.bias.grad += out_grad.sum(axis=(0, 2, 3))
        kernels = p.kernels.value
        dxf = np.zeros_like(xf)
        buf = np.empty((n, c, span), dtype=xf.dtype)
        for kh in range(k):
            for kw in range(k):
                off = kh * wp + kw
                S = xf[:, :, off : off + span]
                if p.kernels.trainable:
                    p.kernels.grad[:, :, kh, kw] += np.matmul(gwf, S.transpose(0, 2, 1)).sum(axis=0)
                tap_t = np.ascontiguousarray(kernels[:, :, kh, kw].T)
                np.matmul(tap_t, gwf, out=buf)
                dxf[:, :, off : off + span] += buf
        dxp = dxf[:, :, : hp * wp].reshape(n, c, hp, wp)
        return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp

    def _backward_windowed(self, out_grad, xp, in_shape):
        n, c, h, w = in_shape
        p = self.p
        k, s, pad = p.kernel_size, p.stride, p.padding
        oh, ow = out_grad.shape[2], out_grad.shape[3]
        if p.kernels.trainable:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            p.kernels.grad += np.tensordot(out_grad, win, axes=((0, 2, 3), (0, 2, 3)))
            if p.bias is not None:
                p.bias.grad += out_grad.sum(axis=(0, 2, 3))
        taps = np.tensordot(out_grad, p.kernels.value, axes=((1,), (0,)))
        taps = taps.transpose(0, 3, 1, 2, 4, 5)  # (n, c_in, oh, ow, k, k)
        dxp = np.zeros_like(xp)
        for kh in range(k):
            for kw in range(k):
                dxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += taps[..., kh, kw]
        return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


class _Pool2d(Layer):
    """Shared geometry for max/average pooling (ceil or floor mode)."""

    def __init__(self, name: str, kernel: int, stride: int, ceil_mode: bool = True):
        if kernel < 1 or stride < 1:
            raise ShapeError(f"{name}: kernel and stride must be positive")
        if ceil_mode and stride > kernel:
            raise ShapeError(f"{name}: ceil mode requires stride <= kernel ({stride} > {kernel})")
        self.name = name
        self.kernel = kernel
        self.stride = stride
        self.ceil_mode = ceil_mode
        self._cache = None

    def plan(self, shape):
        c, h, w = shape
        k = self.kernel
        if k > h or k > w:
            raise ShapeError(f"{self.name}: window {k}x{k} larger than input {h}x{w}")
        oh = pool_out_dim(h, k, self.stride, self.ceil_mode)
        ow = pool_out_dim(w, k, self.stride, self.ceil_mode)
        return (c, oh, ow)

    def spec_row(self):
        return {"layer": self.name, "kernel": self.kernel, "count": None, "stride": self.stride}

    def _windows(self, data: np.ndarray, fill: float):
        """Strided (n, c, oh, ow, k, k) window view over boundary-padded input.

        Ceil mode lets the last window overrun the input edge; padding with
        `fill` up to full window coverage keeps a single strided view valid.
        """
        n, c, h, w = data.shape
        k, s = self.kernel, self.stride
        _, oh, ow = self.plan((c, h, w))
        hf = (oh - 1) * s + k
        wf = (ow - 1) * s + k
        if hf > h or wf > w:
            data = np.pad(data, ((0, 0), (0, 0), (0, hf - h), (0, wf - w)), constant_values=fill)
        win = sliding_window_view(data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win, (n, c, h, w), (oh, ow), (hf, wf)


class MaxPool2d(_Pool2d):
    """Max pooling; backward routes the gradient to the window argmax
    (first occurrence in row-major order on ties)."""

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        win, in_shape, (oh, ow), full = self._windows(x.data, fill=-np.inf)
        n, c = in_shape[0], in_shape[1]
        flat = win.reshape(n, c, oh, ow, self.kernel * self.kernel)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, in_shape, full)
        return Tensor(np.ascontiguousarray(out))

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        arg, (n, c, h, w), (hf, wf) = self._cache
        k, s = self.kernel, self.stride
        oh, ow = arg.shape[2], arg.shape[3]
        dxf = np.zeros((n, c, hf, wf), dtype=out_grad.dtype)
        for tap in range(k * k):
            kh, kw = divmod(tap, k)
            contrib = np.where(arg == tap, out_grad, 0.0)
            dxf[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += contrib
        return dxf[:, :, :h, :w]


class AvgPool2d(_Pool2d):
    """Average pooling; windows clipped at the boundary divide by their
    actual (clipped) element count."""

    def _counts(self, h: int, w: int, oh: int, ow: int) -> np.ndarray:
        k, s = self.kernel, self.stride
        rows = np.minimum(np.arange(oh) * s + k, h) - np.arange(oh) * s
        cols = np.minimum(np.arange(ow) * s + k, w) - np.arange(ow) * s
        return (rows[:, None] * cols[None, :]).astype(float)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        win, in_shape, (oh, ow), full = self._windows(x.data, fill=0.0)
        n, c, h, w = in_shape
        cnt = self._counts(h, w, oh, ow)
        out = win.sum(axis=(4, 5)) / cnt[None, None, :, :]
        self._cache = (in_shape, (oh, ow), full, cnt)
        return Tensor(out.astype(x.dtype, copy=False))

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        (n, c, h, w), (oh, ow), (hf, wf), cnt = self._cache
        k, s = self.kernel, self.stride
        g = out_grad / cnt[None, None, :, :]
        dxf = np.zeros((n, c, hf, wf), dtype=out_grad.dtype)
        for kh in range(k):
            for kw in range(k):
                dxf[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += g
        return dxf[:, :, :h, :w]


class ReLU(Layer):
    def __init__(self, name: str):
        self.name = name
        self._mask = None

    def plan(self, shape):
        return shape

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._mask = x.data > 0
        return Tensor(np.where(self._mask, x.data, 0.0).astype(x.dtype, copy=False))

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return np.where(self._mask, out_grad, 0.0)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (n, h, w), with scale/shift.

    Train mode normalizes by the batch mean and biased variance and folds
    them into the running statistics by exponential moving average; infer
    mode normalizes by the running statistics.  Backward is the full
    derivative through the batch statistics:

        dxhat = g * scale
        dvar  = sum(dxhat * (x - mu)) * (-1/2) * (var + eps)^(-3/2)
        dmu   = -sum(dxhat) / sqrt(var + eps)
        dx    = dxhat / sqrt(var + eps) + dvar * 2(x - mu)/m + dmu/m
    """

    def __init__(self, name: str, p: BatchNormParams):
        self.name = name
        self.p = p
        self._cache = None

    def params(self) -> list[Param]:
        return self.p.params()

    def plan(self, shape):
        c = shape[0]
        if c != self.p.channels:
            raise ShapeError(f"{self.name}: input has {c} channels, batch norm has {self.p.channels}")
        return shape

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.plan((x.shape[1], x.shape[2], x.shape[3]))
        p = self.p
        data = x.data
        if train:
            if x.shape[0] < 2:
                raise ShapeError(f"{self.name}: train mode needs batch size >= 2, got {x.shape[0]}")
            mu = data.mean(axis=(0, 2, 3))
            var = data.var(axis=(0, 2, 3))
            m = p.momentum
            p.running_mean.value[...] = m * p.running_mean.value + (1.0 - m) * mu
            p.running_var.value[...] = m * p.running_var.value + (1.0 - m) * var
        else:
            mu = p.running_mean.value
            var = p.running_var.value
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out = p.scale.value[None, :, None, None] * xhat + p.shift.value[None, :, None, None]
        self._cache = (data, mu, inv_std, xhat, train)
        return Tensor(out.astype(x.dtype, copy=False))

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        data, mu, inv_std, xhat, train = self._cache
        p = self.p
        p.scale.grad += (out_grad * xhat).sum(axis=(0, 2, 3))
        p.shift.grad += out_grad.sum(axis=(0, 2, 3))
        dxhat = out_grad * p.scale.value[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        n, c, h, w = data.shape
        m = n * h * w
        xc = data - mu[None, :, None, None]
        dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std**3
        dmu = -(dxhat.sum(axis=(0, 2, 3))) * inv_std
        dx = (
            dxhat * inv_std[None, :, None, None]
            + (2.0 / m) * xc * dvar[None, :, None, None]
            + dmu[None, :, None, None] / m
        )
        return dx


class Flatten(Layer):
    """(n, c, h, w) -> (n, c*h*w) bridge into the fully connected stack."""

    def __init__(self, name: str = "flatten"):
        self.name = name
        self._shape = None

    def plan(self, shape):
        c, h, w = shape
        return (c * h * w, 1, 1)

    def forward(self, x: Tensor, train: bool = False):
        self._shape = x.shape
        return x.data.reshape(x.shape[0], -1)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return out_grad.reshape(self._shape)


class FullyConnected(Layer):
    """Affine map on flattened activations: y = x @ W + b."""

    def __init__(self, name: str, weights: Param, bias: Param):
        self.name = name
        self.weights = weights
        self.bias = bias
        self._x = None

    @classmethod
    def create(cls, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, out_dim)).astype(dtype)
        b = np.zeros(out_dim, dtype=dtype)
        return cls(name, Param(f"{name}.weights", w), Param(f"{name}.bias", b))

    def params(self) -> list[Param]:
        return [self.weights, self.bias]

    def plan(self, shape):
        d = shape[0] * shape[1] * shape[2]
        if d != self.weights.value.shape[0]:
            raise ShapeError(
                f"{self.name}: input dim {d} does not match weights {self.weights.value.shape}"
            )
        return (self.weights.value.shape[1], 1, 1)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.weights.value.shape[0]:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} does not match weights {self.weights.value.shape}"
            )
        self._x = x
        return x @ self.weights.value + self.bias.value

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        if self.weights.trainable:
            self.weights.grad += self._x.T @ out_grad
            self.bias.grad += out_grad.sum(axis=0)
        return out_grad @ self.weights.value.T


class ReLU1d(Layer):
    """ReLU on 2-D (n, d) activations between fully connected layers."""

    def __init__(self, name: str):
        self.name = name
        self._mask = None

    def plan(self, shape):
        return shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return np.where(self._mask, out_grad, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction so extreme logits cannot overflow."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Returns (loss, grad) with grad = (softmax - onehot) / batch.
    """
    n, p = logits.shape
    if p < 2:
        raise ShapeError(f"need at least 2 classes, got {p}")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= p:
        raise ShapeError(f"labels must lie in [0, {p}), got range [{labels.min()}, {labels.max()}]")
    probs = softmax(logits)
    # log-prob via the shifted logits to avoid log(0) for confident rows
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; all parts must share n, h, w."""
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"channel concat needs matching (n, h, w): {base} vs {p.shape}")
    return np.concatenate(parts, axis=1)


def split_channels(grad: np.ndarray, channel_counts: list[int]) -> list[np.ndarray]:
    """Inverse of concat_channels for the backward pass: slice grad per part."""
    if sum(channel_counts) != grad.shape[1]:
        raise ShapeError(f"split counts {channel_counts} do not sum to {grad.shape[1]} channels")
    out = []
    at = 0
    for c in channel_counts:
        out.append(grad[:, at : at + c])
        at += c
    return out
