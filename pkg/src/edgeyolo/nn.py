"""Dense NCHW tensors and the small set of layer kernels the detector needs.

Everything here is plain numpy. Each forward kernel has a matching backward
used by the training loop; forwards are pure functions of their inputs, so
identical inputs always produce bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("linear", "leaky_relu", "relu", "mish")


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class Tensor:
    """Rank-4 dense array in (batch, channels, height, width) order."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (n,c,h,w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int, dtype=np.float32) -> "Tensor":
        return cls(np.zeros((n, c, h, w), dtype=dtype))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor{self.data.shape} dtype={self.data.dtype}"


@dataclass
class ConvParams:
    """Weights for a square same-padded convolution.

    weights has shape (filters, in_channels, kernel, kernel); bias (filters,).
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weights must be (out,in,k,k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ShapeError(f"conv kernel must be odd for same padding, got {w.shape[2]}")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
        self.weights = w
        self.bias = b

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNormParams:
    """Per-channel affine + running statistics, inference semantics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        vecs = [np.asarray(v) for v in (self.gamma, self.beta, self.mean, self.var)]
        c = vecs[0].shape
        if any(v.ndim != 1 or v.shape != c for v in vecs):
            raise ShapeError("batch norm vectors must be 1-d and the same length")
        if np.any(vecs[3] < 0):
            raise ValueError("running variance must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma, self.beta, self.mean, self.var = vecs

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv_out_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def pool_out_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2 if stride == 1 else 0
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# functional kernels (ndarray in, ndarray out)
# ---------------------------------------------------------------------------

def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, cin_w, k, _ = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv expects {cin_w} input channels, got {cin}")
    pad = k // 2
    hout = conv_out_size(h, k, stride)
    wout = conv_out_size(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    acc = np.zeros((n, cout, hout * wout), dtype=np.result_type(x, w))
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * hout:stride, kj:kj + stride * wout:stride]
            acc += np.matmul(w[:, :, ki, kj], patch.reshape(n, cin, -1))
    acc += b[None, :, None]
    return acc.reshape(n, cout, hout, wout)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    pad = k // 2
    hout, wout = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dyr = dy.reshape(n, cout, -1)
    for ki in range(k):
        for kj in range(k):
            sl = (slice(None), slice(None),
                  slice(ki, ki + stride * hout, stride),
                  slice(kj, kj + stride * wout, stride))
            patch = xp[sl].reshape(n, cin, -1)
            dw[:, :, ki, kj] = np.einsum("nol,ncl->oc", dyr, patch)
            dxp[sl] += np.matmul(w[:, :, ki, kj].T, dyr).reshape(n, cin, hout, wout)
    db = dy.sum(axis=(0, 2, 3))
    dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw, db


def batchnorm_infer_raw(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                        mean: np.ndarray, var: np.ndarray, eps: float) -> np.ndarray:
    inv = gamma / np.sqrt(var + eps)
    return x * inv[None, :, None, None] + (beta - mean * inv)[None, :, None, None]


def batchnorm_infer_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                             mean: np.ndarray, var: np.ndarray,
                             eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dx = dy * (gamma * inv)[None, :, None, None]
    return dx, dgamma, dbeta


def batchnorm_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                            eps: float) -> tuple[np.ndarray, tuple]:
    """Normalize by batch statistics (biased variance over n,h,w)."""
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma, mu, var)


def batchnorm_train_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma, _, _ = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    gi = (gamma * inv)[None, :, None, None]
    dx = gi * (dy
               - dbeta[None, :, None, None] / m
               - xhat * dgamma[None, :, None, None] / m)
    return dx, dgamma, dbeta


def activate_raw(x: np.ndarray, kind: str, alpha: float = 0.1) -> np.ndarray:
    if kind == "linear":
        return x
    if kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"leaky slope must be in (0,1), got {alpha}")
        return np.where(x > 0, x, alpha * x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "mish":
        sp = np.logaddexp(0.0, x)  # softplus, overflow-safe
        return x * np.tanh(sp)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(dy: np.ndarray, x: np.ndarray, kind: str, alpha: float = 0.1) -> np.ndarray:
    if kind == "linear":
        return dy
    if kind == "leaky_relu":
        return dy * np.where(x > 0, 1.0, alpha)
    if kind == "relu":
        return dy * (x > 0)
    if kind == "mish":
        sp = np.logaddexp(0.0, x)
        t = np.tanh(sp)
        sig = 1.0 / (1.0 + np.exp(-x))
        return dy * (t + x * (1.0 - t * t) * sig)
    raise ValueError(f"unknown activation {kind!r}")


def maxpool_forward(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pool; stride-1 pools keep spatial size via -inf same padding.

    Returns (y, argmax) where argmax stores the flat kernel offset that won
    each window, first occurrence in (ki, kj) scan order on ties.
    """
    n, c, h, w = x.shape
    pad = kernel // 2 if stride == 1 else 0
    hout = pool_out_size(h, kernel, stride)
    wout = pool_out_size(w, kernel, stride)
    if hout < 1 or wout < 1:
        raise ShapeError(f"pool {kernel}x{kernel}/{stride} does not fit input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=-np.inf)
    best = np.full((n, c, hout, wout), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, hout, wout), dtype=np.int16)
    for ki in range(kernel):
        for kj in range(kernel):
            patch = xp[:, :, ki:ki + stride * hout:stride, kj:kj + stride * wout:stride]
            better = patch > best
            best = np.where(better, patch, best)
            arg[better] = ki * kernel + kj
    return best, arg


def maxpool_backward(dy: np.ndarray, arg: np.ndarray, x_shape: tuple,
                     kernel: int, stride: int) -> np.ndarray:
    n, c, h, w = x_shape
    pad = kernel // 2 if stride == 1 else 0
    hout, wout = dy.shape[2], dy.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            sl = (slice(None), slice(None),
                  slice(ki, ki + stride * hout, stride),
                  slice(kj, kj + stride * wout, stride))
            dxp[sl] += dy * (arg == ki * kernel + kj)
    return dxp[:, :, pad:pad + h, pad:pad + w]


def upsample2x_raw(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(xs, axis=1)


def concat_backward(dy: np.ndarray, channel_sizes: Sequence[int]) -> list[np.ndarray]:
    splits = np.cumsum(channel_sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(dy, splits, axis=1)]


def split_half(x: np.ndarray, half: int) -> np.ndarray:
    c = x.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"split needs an even channel count, got {c}")
    lo = half * (c // 2)
    return np.ascontiguousarray(x[:, lo:lo + c // 2])


def split_half_backward(dy: np.ndarray, c_total: int, half: int) -> np.ndarray:
    n, _, h, w = dy.shape
    dx = np.zeros((n, c_total, h, w), dtype=dy.dtype)
    lo = half * (c_total // 2)
    dx[:, lo:lo + c_total // 2] = dy
    return dx


# ---------------------------------------------------------------------------
# tensor-level wrappers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Same-padded convolution with zero fill; output HxW = ceil(in/stride)."""
    return Tensor(conv2d_raw(x.data, p.weights, p.bias, p.stride))


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Normalize with the stored running statistics (inference behaviour)."""
    if x.c != p.channels:
        raise ShapeError(f"batch norm expects {p.channels} channels, got {x.c}")
    return Tensor(batchnorm_infer_raw(x.data, p.gamma, p.beta, p.mean, p.var, p.eps))


def activate(x: Tensor, kind: str, alpha: float = 0.1) -> Tensor:
    return Tensor(activate_raw(x.data, kind, alpha))


def max_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    y, _ = maxpool_forward(x.data, kernel, stride)
    return Tensor(y)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    return Tensor(upsample2x_raw(x.data))


def route(inputs: Sequence[Tensor], split: int | None = None) -> Tensor:
    """Concatenate inputs along channels, or take one channel half.

    With split in {0, 1} exactly one input is expected and its lower or upper
    channel half is returned. Otherwise all inputs must agree on (n, h, w).
    """
    if not inputs:
        raise ShapeError("route needs at least one input")
    if split is not None:
        if split not in (0, 1):
            raise ValueError(f"split must be 0 or 1, got {split}")
        if len(inputs) != 1:
            raise ShapeError("split route takes exactly one input")
        return Tensor(split_half(inputs[0].data, split))
    base = inputs[0]
    for t in inputs[1:]:
        if (t.n, t.h, t.w) != (base.n, base.h, base.w):
            raise ShapeError(
                f"route inputs disagree on (n,h,w): {t.shape} vs {base.shape}")
    return Tensor(concat_channels([t.data for t in inputs]))
