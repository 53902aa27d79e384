"""Primitive layers with hand-written forward and backward passes.

Activations are plain numpy arrays laid out as (batch, channel, height, width).
Every function is dtype-preserving so the same code runs in float32 for
training and float64 for gradient checks.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


# When not None, PReLU sign patterns and pooling argmaxes are appended here so a
# gradient checker can detect perturbations that cross a non-differentiable point.
_branch_log: list | None = None


@contextmanager
def record_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


class ShapeError(ValueError):
    """Raised when tensor shapes disagree; the message names the dimension."""


def check_tensor4(x: np.ndarray, name: str = "x") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: every dimension must be >= 1, got {x.shape}")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    @classmethod
    def init(cls, in_c: int, out_c: int, k: int, rng: np.random.Generator, dtype=np.float32):
        std = np.sqrt(2.0 / (in_c * k * k))
        w = rng.standard_normal((out_c, in_c, k, k)) * std
        return cls(w.astype(dtype), np.zeros(out_c, dtype=dtype))


@dataclass
class PReluParams:
    alpha: np.ndarray  # (c,)

    @classmethod
    def init(cls, c: int, dtype=np.float32):
        return cls(np.full(c, PRELU_INIT, dtype=dtype))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, c: int, dtype=np.float32):
        return cls(
            np.ones(c, dtype=dtype),
            np.zeros(c, dtype=dtype),
            np.zeros(c, dtype=dtype),
            np.ones(c, dtype=dtype),
        )


# --------------------------------------------------------------------------
# convolution (stride 1, zero "same" padding)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape (c*k*k, n*h*w) for a same-padded stride-1 conv."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _check_conv(x: np.ndarray, p: ConvParams, pad: int | None) -> int:
    check_tensor4(x, "conv input")
    out_c, in_c, kh, kw = p.weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != in_c:
        raise ShapeError(f"conv channel mismatch: input has {x.shape[1]} channels, kernel expects in_c={in_c}")
    if p.bias.shape != (out_c,):
        raise ShapeError(f"conv bias length {p.bias.shape} != out_c={out_c}")
    same = (kh - 1) // 2
    if pad is not None and pad != same:
        raise ShapeError(f"pad must be (k-1)/2={same} for a {kh}x{kh} kernel, got {pad}")
    return kh


def conv2d_forward_cols(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that also returns the patch matrix for reuse in backward."""
    k = _check_conv(x, p, None)
    n, _, h, w = x.shape
    cols = _im2col(x, k)
    out_c = p.weight.shape[0]
    y = p.weight.reshape(out_c, -1) @ cols
    y = y.reshape(out_c, n, h, w).transpose(1, 0, 2, 3) + p.bias[None, :, None, None]
    return np.ascontiguousarray(y), cols


def conv2d_forward(x: np.ndarray, p: ConvParams, pad: int | None = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation plus bias."""
    _check_conv(x, p, pad)
    return conv2d_forward_cols(x, p)[0]


def conv2d_backward(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_grad_x: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_w, grad_b). Pass ``cols`` from the forward to skip recomputing it."""
    k = _check_conv(x, p, None)
    n, _, h, w = x.shape
    out_c = p.weight.shape[0]
    if grad_out.shape != (n, out_c, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, out_c, h, w)}")
    if cols is None:
        cols = _im2col(x, k)
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_c, -1)
    grad_w = (g @ cols.T).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_grad_x:
        # full correlation with the flipped, transposed kernel
        flipped = ConvParams(
            np.ascontiguousarray(p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
            np.zeros(p.weight.shape[1], dtype=p.weight.dtype),
        )
        grad_x = conv2d_forward(grad_out, flipped)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# PReLU


def _check_channels(x: np.ndarray, vec: np.ndarray, what: str) -> None:
    check_tensor4(x, f"{what} input")
    if vec.shape != (x.shape[1],):
        raise ShapeError(f"{what}: parameter length {vec.shape[0]} != channel count {x.shape[1]}")


def prelu_forward(x: np.ndarray, p: PReluParams) -> np.ndarray:
    _check_channels(x, p.alpha, "prelu")
    if _branch_log is not None:
        _branch_log.append(x < 0)
    return np.where(x >= 0, x, p.alpha[None, :, None, None] * x)


def prelu_backward(x: np.ndarray, p: PReluParams, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_channels(x, p.alpha, "prelu")
    neg = x < 0
    grad_x = np.where(neg, p.alpha[None, :, None, None] * grad_out, grad_out)
    grad_alpha = np.where(neg, x * grad_out, 0).sum(axis=(0, 2, 3))
    return grad_x, grad_alpha.astype(x.dtype)


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(
    x: np.ndarray, p: BatchNormParams, mode: str = "train"
) -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel normalization over (n, h, w).

    ``train`` uses batch statistics and updates the running statistics in
    place; ``batch`` uses batch statistics without touching them; ``infer``
    uses the running statistics.
    """
    _check_channels(x, p.gamma, "batchnorm")
    if mode in ("train", "batch"):
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if mode == "train":
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (count / (count - 1)) if count > 1 else var
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mean
            p.running_var[...] = (1 - m) * p.running_var + m * unbiased
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]
    return y, BatchNormCache(xhat, inv_std, mode)


def batchnorm_backward(
    cache: BatchNormCache, p: BatchNormParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gamma, grad_beta)."""
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"batchnorm grad shape {grad_out.shape} != {cache.xhat.shape}")
    grad_gamma = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * p.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.mode == "infer":
        return dxhat * inv_std, grad_gamma, grad_beta
    n, _, h, w = grad_out.shape
    count = n * h * w
    sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx = (dxhat * cache.xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std / count * (count * dxhat - sum_d - cache.xhat * sum_dx)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# 2x2 max pooling with stored indices, and the matching unpooling


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns pooled values and the in-window argmax (row-major offset 0..3).

    Ties go to the lowest offset.
    """
    check_tensor4(x, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2x2 needs even spatial dims, got h={h}, w={w}; pad images to a multiple of 2**depth"
        )
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    if _branch_log is not None:
        _branch_log.append(idx)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def unpool2x2(y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Places each pooled value at its recorded window offset; zeros elsewhere."""
    check_tensor4(y, "unpool input")
    if idx.shape != y.shape:
        raise ShapeError(f"unpool indices shape {idx.shape} != pooled shape {y.shape}")
    n, c, h, w = y.shape
    win = np.zeros((n, c, h, w, 4), dtype=y.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), y[..., None], axis=-1)
    return win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return unpool2x2(grad_out, idx)


def unpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, h, w = idx.shape
    if grad_out.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError(f"unpool grad shape {grad_out.shape} != {(n, c, 2 * h, 2 * w)}")
    win = grad_out.reshape(n, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, 4)
    return np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]


# --------------------------------------------------------------------------
# gating and classification nonlinearities


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x, np.float32))


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the forward *output* y."""
    return grad_out * y * (1 - y)


def softmax_over_channels(x: np.ndarray) -> np.ndarray:
    check_tensor4(x, "softmax input")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs c >= 2, got {x.shape[1]}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the forward *output* y."""
    return y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))
