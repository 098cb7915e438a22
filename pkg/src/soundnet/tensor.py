"""Dense 1-D kernels with explicit forward and backward passes.

Activations are plain ``numpy`` arrays of shape ``(batch, channels, length)``.
Every kernel computes in the dtype of its input, so float32 arrays train in
float32 and float64 arrays are used by the finite-difference checks.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
KL_FLOOR = 1e-8


class ShapeError(ValueError):
    """An array does not have the shape a kernel requires."""


class InputTooShortError(ValueError):
    """The input is shorter than the smallest length a layer (or network) accepts."""

    def __init__(self, message: str, min_length: int):
        super().__init__(f"input too short: {message} (minimum admissible length is {min_length})")
        self.min_length = min_length


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of a 1-D convolution.

    For ``conv1d_*`` the weight has shape ``(out_channels, in_channels, kernel)``.
    The transposed kernels reuse the same layout read the other way round: a
    weight of shape ``(a, b, k)`` maps ``a`` channels to ``b`` channels, which
    makes ``transposed_conv1d_forward`` the adjoint of ``conv1d_forward``.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 3 or min(self.weight.shape) < 1:
            raise ShapeError(f"weight must be a non-empty 3-D array, got shape {self.weight.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def has_running_stats(self) -> bool:
        return self.running_mean is not None and self.running_var is not None


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


# --------------------------------------------------------------------------
# shape arithmetic
# --------------------------------------------------------------------------

def conv_output_length(length: int, kernel_size: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel_size) // stride + 1


def conv_min_input_length(kernel_size: int, stride: int, padding: int, min_output: int = 1) -> int:
    """Smallest input length whose convolution output has ``min_output`` positions."""
    return max(1, (min_output - 1) * stride + kernel_size - 2 * padding)


def pool_output_length(length: int, pool_size: int, stride: int) -> int:
    return (length - pool_size) // stride + 1


def transposed_output_length(length: int, kernel_size: int, stride: int, padding: int) -> int:
    return (length - 1) * stride - 2 * padding + kernel_size


def _check3(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"{what} must be (batch, channels, length), got shape {x.shape}")
    return x


def _check_like(grad: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    grad = np.asarray(grad)
    if grad.shape != tuple(shape):
        raise ShapeError(f"{what} has shape {grad.shape}, expected {tuple(shape)}")
    return grad


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel_size: int, stride: int, padding: int, out_len: int) -> np.ndarray:
    """Gather sliding windows into a ``(batch, out_len, channels * kernel)`` matrix."""
    batch, channels, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, kernel_size, axis=2)[:, :, ::stride][:, :, :out_len]
    # a contiguous copy keeps the following matmul on the BLAS fast path
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3).reshape(batch, out_len, channels * kernel_size))


def _col2im(cols: np.ndarray, channels: int, kernel_size: int, stride: int, full_len: int) -> np.ndarray:
    """Scatter-add ``(batch, n, channels * kernel)`` columns back onto a length-``full_len`` signal."""
    batch, n, _ = cols.shape
    taps = np.ascontiguousarray(cols.reshape(batch, n, channels, kernel_size).transpose(0, 2, 3, 1))
    out = np.zeros((batch, channels, full_len), dtype=cols.dtype)
    span = stride * (n - 1) + 1
    for j in range(kernel_size):
        out[:, :, j:j + span:stride] += taps[:, :, j]
    return out


def conv1d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlate ``x`` with ``params.weight`` (no kernel flip), zero padding."""
    x = _check3(x, "input")
    out_c, in_c, k = params.weight.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"input channels: got {x.shape[1]}, weight expects in_channels={in_c}")
    if params.bias.shape != (out_c,):
        raise ShapeError(f"bias: got shape {params.bias.shape}, expected ({out_c},)")
    batch, _, length = x.shape
    out_len = conv_output_length(length, k, params.stride, params.padding)
    if out_len < 1:
        raise InputTooShortError(
            f"length {length} with kernel {k}, stride {params.stride}, padding {params.padding}",
            conv_min_input_length(k, params.stride, params.padding),
        )
    cols = _im2col(x, k, params.stride, params.padding, out_len)
    w = params.weight.reshape(out_c, in_c * k).astype(x.dtype, copy=False)
    out = cols @ w.T
    out += params.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def conv1d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray, input_grad: bool = True
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of ``conv1d_forward`` w.r.t. input, weight and bias.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    x = _check3(x, "input")
    out_c, in_c, k = params.weight.shape
    batch, channels, length = x.shape
    if channels != in_c:
        raise ShapeError(f"input channels: got {channels}, weight expects in_channels={in_c}")
    out_len = conv_output_length(length, k, params.stride, params.padding)
    grad_out = _check_like(grad_out, (batch, out_c, out_len), "grad_out")

    cols = _im2col(x, k, params.stride, params.padding, out_len)
    g = grad_out.transpose(0, 2, 1)  # (batch, out_len, out_c)
    grad_w = (g.reshape(-1, out_c).T @ cols.reshape(-1, in_c * k)).reshape(out_c, in_c, k)
    grad_b = grad_out.sum(axis=(0, 2))
    if not input_grad:
        return None, grad_w, grad_b

    w = params.weight.reshape(out_c, in_c * k).astype(x.dtype, copy=False)
    grad_cols = g @ w
    full = _col2im(grad_cols, in_c, k, params.stride, length + 2 * params.padding)
    grad_x = full[:, :, params.padding:params.padding + length]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def transposed_conv1d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Fractionally strided convolution: the adjoint of ``conv1d_forward`` plus a bias.

    ``params.weight`` has shape ``(in_channels, out_channels, kernel)``.
    """
    x = _check3(x, "input")
    in_c, out_c, k = params.weight.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"input channels: got {x.shape[1]}, weight expects in_channels={in_c}")
    if params.bias.shape != (out_c,):
        raise ShapeError(f"bias: got shape {params.bias.shape}, expected ({out_c},)")
    batch, _, length = x.shape
    out_len = transposed_output_length(length, k, params.stride, params.padding)
    if out_len < 1:
        need = -(-(1 - k + 2 * params.padding) // params.stride) + 1
        raise InputTooShortError(
            f"length {length} with transposed kernel {k}, stride {params.stride}, padding {params.padding}",
            max(1, need),
        )
    w = params.weight.reshape(in_c, out_c * k).astype(x.dtype, copy=False)
    cols = x.transpose(0, 2, 1) @ w
    full = _col2im(cols, out_c, k, params.stride, (length - 1) * params.stride + k)
    out = full[:, :, params.padding:params.padding + out_len]
    out += params.bias.astype(x.dtype, copy=False)[None, :, None]
    return np.ascontiguousarray(out)


def transposed_conv1d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = _check3(x, "input")
    in_c, out_c, k = params.weight.shape
    batch, channels, length = x.shape
    if channels != in_c:
        raise ShapeError(f"input channels: got {channels}, weight expects in_channels={in_c}")
    out_len = transposed_output_length(length, k, params.stride, params.padding)
    grad_out = _check_like(grad_out, (batch, out_c, out_len), "grad_out")

    # the adjoint of the adjoint is the ordinary convolution
    cols = _im2col(grad_out, k, params.stride, params.padding, length)  # (batch, length, out_c*k)
    w = params.weight.reshape(in_c, out_c * k).astype(grad_out.dtype, copy=False)
    grad_x = (cols @ w.T).transpose(0, 2, 1)
    xt = x.transpose(0, 2, 1).reshape(-1, in_c)
    grad_w = (xt.T @ cols.reshape(-1, out_c * k)).reshape(in_c, out_c, k)
    grad_b = grad_out.sum(axis=(0, 2))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool1d_forward(x: np.ndarray, pool_size: int, stride: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Max over windows; returns the output and the absolute argmax position of each window.

    ``stride`` defaults to ``pool_size`` (non-overlapping windows). Ties resolve to
    the lowest index.
    """
    x = _check3(x, "input")
    stride = pool_size if stride is None else stride
    if pool_size < 1 or stride < 1:
        raise ValueError(f"pool_size and stride must be >= 1, got {pool_size}, {stride}")
    length = x.shape[2]
    out_len = pool_output_length(length, pool_size, stride)
    if out_len < 1:
        raise InputTooShortError(f"length {length} with pool size {pool_size}", pool_size)
    windows = sliding_window_view(x, pool_size, axis=2)[:, :, ::stride][:, :, :out_len]
    local = windows.argmax(axis=3)
    out = np.take_along_axis(windows, local[..., None], axis=3)[..., 0]
    argmax = local + np.arange(out_len)[None, None, :] * stride
    return np.ascontiguousarray(out), argmax


def maxpool1d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_length: int) -> np.ndarray:
    grad_out = _check3(grad_out, "grad_out")
    _check_like(argmax, grad_out.shape, "argmax")
    batch, channels, _ = grad_out.shape
    grad_x = np.zeros((batch, channels, input_length), dtype=grad_out.dtype)
    b = np.arange(batch)[:, None, None]
    c = np.arange(channels)[None, :, None]
    np.add.at(grad_x, (b, c, argmax), grad_out)
    return grad_x


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm_forward(
    x: np.ndarray, params: BatchNormParams, mode: str = "train"
) -> Tuple[np.ndarray, BatchNormParams, BatchNormCache]:
    """Normalize each channel over (batch, length).

    Returns ``(output, params_after, cache)``. In train mode ``params_after``
    carries the updated running statistics; ``params`` itself is not modified.
    Unset running statistics are initialised from the first batch.
    """
    x = _check3(x, "input")
    channels = x.shape[1]
    if channels != params.channels:
        raise ShapeError(f"input channels: got {channels}, batchnorm has {params.channels}")
    gamma = params.gamma.astype(x.dtype, copy=False)[None, :, None]
    beta = params.beta.astype(x.dtype, copy=False)[None, :, None]

    if mode == "train":
        count = x.shape[0] * x.shape[2]
        if count < 2:
            raise ShapeError(f"train-mode batchnorm needs batch*length >= 2 per channel, got {count}")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = params.momentum
        if params.has_running_stats:
            running_mean = (1 - m) * params.running_mean + m * mean
            running_var = (1 - m) * params.running_var + m * var
        else:
            running_mean, running_var = mean.copy(), var.copy()
        updated = replace(params, running_mean=running_mean, running_var=running_var)
    elif mode == "eval":
        if not params.has_running_stats:
            raise ValueError("eval-mode batchnorm requires running statistics, but they are unset")
        mean = params.running_mean.astype(x.dtype, copy=False)
        var = params.running_var.astype(x.dtype, copy=False)
        updated = params
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma * x_hat + beta
    return out, updated, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=params.gamma, mode=mode)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_out = _check_like(grad_out, cache.x_hat.shape, "grad_out")
    x_hat = cache.x_hat
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    scale = (cache.gamma * cache.inv_std).astype(grad_out.dtype, copy=False)[None, :, None]
    if cache.mode == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    count = x_hat.shape[0] * x_hat.shape[2]
    mean_g = grad_beta[None, :, None] / count
    mean_gx = grad_gamma[None, :, None] / count
    grad_x = scale * (grad_out - mean_g - x_hat * mean_gx)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# ReLU
# --------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # gradient is 0 at exactly x == 0
    return np.where(np.asarray(x) > 0, grad_out, 0).astype(np.result_type(grad_out), copy=False)


# --------------------------------------------------------------------------
# softmax / KL
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax of an empty array")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def kl_terms(p: np.ndarray, q: np.ndarray, axis: int = -1, floor: float = KL_FLOOR) -> np.ndarray:
    """Vectorised ``sum_j p_j log(p_j / max(q_j, floor))`` along ``axis``; zero-mass terms drop out."""
    p = np.asarray(p)
    q = np.maximum(np.asarray(q), floor)
    safe_p = np.where(p > 0, p, 1)
    return np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0).sum(axis=axis)


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """KL(P || Q) for two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"P and Q must be 1-D of equal length, got {p.shape} and {q.shape}")
    for name, d in (("P", p), ("Q", q)):
        if abs(d.sum() - 1.0) > 1e-3:
            raise ValueError(f"{name} does not sum to 1 (sum={d.sum():.6f})")
    return float(max(kl_terms(p, q, floor=floor), 0.0))


def kl_floored_gradient(p: np.ndarray, q: np.ndarray, axis: int = -1, floor: float = KL_FLOOR) -> np.ndarray:
    """Gradient w.r.t. the logits of ``kl_terms(p, softmax(logits))`` given ``q = softmax(logits)``.

    Classes whose probability sits below the floor contribute a constant term,
    so they drop out of ``p``; with nothing floored this is ``q - p``.
    """
    live = np.where(q >= floor, p, 0)
    return q * live.sum(axis=axis, keepdims=True) - live


def kl_softmax_gradient(p, logits) -> np.ndarray:
    """Gradient of ``KL(p || softmax(logits))`` w.r.t. the logits, ``softmax(logits) - p`` away from the floor."""
    p = np.asarray(p)
    logits = np.asarray(logits)
    if p.shape != logits.shape:
        raise ShapeError(f"P and logits must have equal shape, got {p.shape} and {logits.shape}")
    return kl_floored_gradient(p, softmax(logits))
