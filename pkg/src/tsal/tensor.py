"""Dense rank-4 tensors and the convolution/activation primitives.

All values are 64-bit floats in row-major (batch, channel, height, width)
layout. Operations are pure: inputs are never mutated and outputs are
freshly allocated, so values are safe to share across threads.

Two convolution paths exist: :func:`conv2d_forward` uses an im2col +
matrix-multiply formulation, while :func:`conv2d_forward_direct` is the
naive sliding-window reference it must agree with to within 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Immutable (by convention) rank-4 array: batch x channels x height x width.

    Construction validates the invariants: four dimensions, every
    dimension >= 1, every element finite.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionMismatch(f"expected 4 dims, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionMismatch(f"all dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @staticmethod
    def zeros(batch: int, channels: int, height: int, width: int) -> "Tensor4":
        return Tensor4(np.zeros((batch, channels, height, width)))

    @staticmethod
    def full(batch: int, channels: int, height: int, width: int, value: float) -> "Tensor4":
        return Tensor4(np.full((batch, channels, height, width), float(value)))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class Conv2dParams:
    """Weights (out_channels, in_channels, kh, kw), per-filter bias, zero padding.

    Stride is fixed at 1. Kernels must be square with odd extent so that
    symmetric padding can preserve spatial dims.
    """

    weights: np.ndarray
    bias: np.ndarray
    padding: int

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise DimensionMismatch(f"weights must be rank 4, got shape {self.weights.shape}")
        kh, kw = self.weights.shape[2], self.weights.shape[3]
        if kh != kw or kh % 2 == 0:
            raise DimensionMismatch(f"kernel must be square with odd extent, got {kh}x{kw}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"bias length {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )
        if self.padding < 0:
            raise DimensionMismatch("padding must be >= 0")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two trailing dims; direct assignment beats np.pad at small sizes."""
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p : p + h, p : p + w] = x
    return out


def _check_conv_args(input: Tensor4, params: Conv2dParams) -> None:
    if input.channels != params.in_channels:
        raise DimensionMismatch(
            f"input has {input.channels} channels, kernel expects {params.in_channels}"
        )
    k, p = params.kernel_size, params.padding
    if input.height + 2 * p < k or input.width + 2 * p < k:
        raise DimensionMismatch(
            f"spatial dims {input.height}x{input.width} too small for "
            f"kernel {k} with padding {p}"
        )


def _im2col(padded: np.ndarray, k: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C*k*k, Ho*Wo) patch matrix, (C, kh, kw) flat order."""
    b, c, hp, wp = padded.shape
    ho, wo = hp - k + 1, wp - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo)
    cols = windows.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, b: int, c: int, hp: int, wp: int, k: int) -> np.ndarray:
    """Scatter-add the inverse of :func:`_im2col` back onto the padded grid."""
    ho, wo = hp - k + 1, wp - k + 1
    out = np.zeros((b, c, hp, wp))
    cols = cols.reshape(b, c, k, k, ho, wo)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + ho, dj : dj + wo] += cols[:, :, di, dj]
    return out


def conv2d_forward(input: Tensor4, params: Conv2dParams) -> Tensor4:
    """Stride-1 2-D convolution with symmetric zero padding (im2col path)."""
    _check_conv_args(input, params)
    k, p = params.kernel_size, params.padding
    x = _pad_spatial(input.data, p)
    b = input.batch
    ho, wo = x.shape[2] - k + 1, x.shape[3] - k + 1
    cols = _im2col(x, k)
    w_mat = params.weights.reshape(params.out_channels, -1)
    out = np.matmul(w_mat[None, :, :], cols)
    out += params.bias[None, :, None]
    # Tensor4 construction rejects non-finite results (overflowed accumulations)
    return Tensor4(out.reshape(b, params.out_channels, ho, wo))


def conv2d_forward_direct(input: Tensor4, params: Conv2dParams) -> Tensor4:
    """Reference convolution: explicit sliding-window loops, sequential accumulation.

    Semantically defines :func:`conv2d_forward`; only used at test scale.
    """
    _check_conv_args(input, params)
    k, p = params.kernel_size, params.padding
    x = _pad_spatial(input.data, p)
    b = input.batch
    ho, wo = x.shape[2] - k + 1, x.shape[3] - k + 1
    out = np.empty((b, params.out_channels, ho, wo))
    w = params.weights
    for bi in range(b):
        for co in range(params.out_channels):
            for oi in range(ho):
                for oj in range(wo):
                    acc = params.bias[co]
                    for ci in range(params.in_channels):
                        for ki in range(k):
                            for kj in range(k):
                                acc += w[co, ci, ki, kj] * x[bi, ci, oi + ki, oj + kj]
                    out[bi, co, oi, oj] = acc
    return Tensor4(out)


def conv2d_backward(
    input: Tensor4, params: Conv2dParams, grad_out: Tensor4
) -> tuple[Tensor4, Tensor4, np.ndarray]:
    """Exact gradients of the convolution w.r.t. input, weights, and bias."""
    _check_conv_args(input, params)
    k, p = params.kernel_size, params.padding
    b = input.batch
    ho = input.height + 2 * p - k + 1
    wo = input.width + 2 * p - k + 1
    if grad_out.dims != (b, params.out_channels, ho, wo):
        raise DimensionMismatch(
            f"grad_out dims {grad_out.dims} do not match forward output "
            f"({b}, {params.out_channels}, {ho}, {wo})"
        )
    x = _pad_spatial(input.data, p)
    cols = _im2col(x, k)
    g_mat = grad_out.data.reshape(b, params.out_channels, ho * wo)

    grad_bias = g_mat.sum(axis=(0, 2))
    # (C_out, C_in*k*k) summed over batch
    gw = np.einsum("bop,bcp->oc", g_mat, cols)
    grad_weights = gw.reshape(params.weights.shape)

    w_mat = params.weights.reshape(params.out_channels, -1)
    g_cols = np.matmul(w_mat.T[None, :, :], g_mat)
    grad_padded = _col2im(g_cols, b, params.in_channels, x.shape[2], x.shape[3], k)
    if p > 0:
        grad_input = grad_padded[:, :, p:-p, p:-p]
    else:
        grad_input = grad_padded
    return Tensor4(grad_input), Tensor4(grad_weights), grad_bias


def sigmoid(input: Tensor4) -> Tensor4:
    """Elementwise logistic function 1 / (1 + e^-x)."""
    # tanh form is overflow-free for any finite input
    return Tensor4(0.5 * (1.0 + np.tanh(0.5 * input.data)))


def sigmoid_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    """grad_out * sigma(x) * (1 - sigma(x)), where x is the forward input."""
    _check_same_dims(input, grad_out)
    s = 0.5 * (1.0 + np.tanh(0.5 * input.data))
    return Tensor4(grad_out.data * s * (1.0 - s))


def tanh_act(input: Tensor4) -> Tensor4:
    """Elementwise hyperbolic tangent."""
    return Tensor4(np.tanh(input.data))


def tanh_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    """grad_out * (1 - tanh(x)^2), where x is the forward input."""
    _check_same_dims(input, grad_out)
    t = np.tanh(input.data)
    return Tensor4(grad_out.data * (1.0 - t * t))


def relu(input: Tensor4) -> Tensor4:
    """Elementwise max(x, 0)."""
    return Tensor4(np.maximum(input.data, 0.0))


def relu_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    """grad_out gated by x > 0 (subgradient 0 at x = 0)."""
    _check_same_dims(input, grad_out)
    return Tensor4(grad_out.data * (input.data > 0.0))


def _check_same_dims(a: Tensor4, b: Tensor4) -> None:
    if a.dims != b.dims:
        raise DimensionMismatch(f"dims {a.dims} != {b.dims}")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b)
    return Tensor4(a.data + b.data)


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b)
    return Tensor4(a.data * b.data)


def scale(a: Tensor4, factor: float) -> Tensor4:
    return Tensor4(a.data * float(factor))
