"""Minimal dense numerical kernel.

Everything downstream composes the handful of operations defined here:
2-D convolution (cross-correlation convention, zero padding, odd kernels
only) with its backward pass, bilinear upsampling, global average pooling,
the pairwise softmax used for channel attention, and a few elementwise
helpers. All arrays are float64 and all functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError


class Tensor3:
    """A dense (channels, height, width) block of float64 values.

    Data is stored row-major in (channel, row, column) order. The class is
    a thin, validated wrapper; operations live at module level and return
    new tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractError(f"Tensor3 expects 3-D data, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ContractError(f"Tensor3 dimensions must be positive, got {arr.shape}")
        self.data = arr

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Tensor3":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float) -> "Tensor3":
        return cls(np.full((channels, height, width), float(value)))

    def copy(self) -> "Tensor3":
        return Tensor3(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor3(channels={self.channels}, height={self.height}, width={self.width})"


@dataclass
class ConvKernel:
    """Convolution weights: (out_channels, in_channels, kernel_h, kernel_w) plus bias.

    `dilation` spaces the taps; padding in conv2d is (k-1)*dilation/2 per
    side so spatial size is preserved for odd kernels.
    """

    weights: np.ndarray
    bias: np.ndarray = None
    dilation: int = 1

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ContractError(f"kernel weights must be 4-D, got shape {self.weights.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0])
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weights.shape[0],):
            raise ContractError(
                f"bias shape {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )
        if self.dilation < 1:
            raise ContractError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy(), self.dilation)


def _im2col(data: np.ndarray, kh: int, kw: int, dilation: int) -> np.ndarray:
    """Zero-pad and unfold (C,H,W) into (H*W, C*kh*kw) window rows."""
    c, h, w = data.shape
    ph = (kh - 1) * dilation // 2
    pw = (kw - 1) * dilation // 2
    padded = np.pad(data, ((0, 0), (ph, ph), (pw, pw)))
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    win = sliding_window_view(padded, (eh, ew), axis=(1, 2))[..., ::dilation, ::dilation]
    # win: (C, H, W, kh, kw) -> rows indexed by output pixel
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, c * kh * kw)


def conv2d(x: Tensor3, kernel: ConvKernel) -> Tensor3:
    """Same-size 2-D cross-correlation with zero padding.

    No kernel flip is applied; output[o,i,j] = bias[o] +
    sum_{c,p,q} weights[o,c,p,q] * x[c, i+(p-ch)*d, j+(q-cw)*d] with zero
    outside the input. Odd kernel sizes only.
    """
    if kernel.in_channels != x.channels:
        raise ContractError(
            f"kernel expects {kernel.in_channels} input channels, tensor has {x.channels}"
        )
    if kernel.kernel_h % 2 == 0 or kernel.kernel_w % 2 == 0:
        raise ContractError(
            f"even kernel sizes are not supported: {kernel.kernel_h}x{kernel.kernel_w}"
        )
    h, w = x.height, x.width
    cols = _im2col(x.data, kernel.kernel_h, kernel.kernel_w, kernel.dilation)
    wmat = kernel.weights.reshape(kernel.out_channels, -1)
    out = cols @ wmat.T + kernel.bias
    return Tensor3(out.T.reshape(kernel.out_channels, h, w))


def conv2d_backward(
    x: Tensor3, kernel: ConvKernel, grad_out: Tensor3
) -> tuple[Tensor3, ConvKernel]:
    """Gradients of sum(grad_out * conv2d(x, kernel)) w.r.t. input and kernel.

    Returns (grad_input, grad_kernel) where grad_kernel is a ConvKernel
    whose weights/bias hold the gradients.
    """
    if grad_out.shape != (kernel.out_channels, x.height, x.width):
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"({kernel.out_channels}, {x.height}, {x.width})"
        )
    if kernel.in_channels != x.channels:
        raise ContractError(
            f"kernel expects {kernel.in_channels} input channels, tensor has {x.channels}"
        )
    # d/dweights: correlate input windows with grad_out
    cols = _im2col(x.data, kernel.kernel_h, kernel.kernel_w, kernel.dilation)
    gmat = grad_out.data.reshape(kernel.out_channels, -1)
    grad_w = (gmat @ cols).reshape(kernel.weights.shape)
    grad_b = gmat.sum(axis=1)
    # d/dinput: conv of grad_out with the in/out-transposed, spatially
    # flipped kernel (same padding, same dilation)
    flipped = np.ascontiguousarray(kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d(grad_out, ConvKernel(flipped, None, kernel.dilation))
    return grad_x, ConvKernel(grad_w, grad_b, kernel.dilation)


def global_avg_pool(x: Tensor3) -> np.ndarray:
    """Per-channel spatial mean; returns a length-C vector."""
    return x.data.mean(axis=(1, 2))


@lru_cache(maxsize=256)
def _upsample_matrix(size: int, factor: int) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix (size*factor, size).

    Sample centers follow the align-corners-false convention: output index
    i reads from source coordinate (i + 0.5)/factor - 0.5, clamped to the
    valid range.
    """
    n_out = size * factor
    mat = np.zeros((n_out, size))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    t = src - lo
    mat[np.arange(n_out), lo] += 1.0 - t
    mat[np.arange(n_out), hi] += t
    mat.setflags(write=False)
    return mat


def bilinear_upsample(x: Tensor3, factor: int) -> Tensor3:
    """Upsample spatially by an integer factor with bilinear interpolation."""
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    my = _upsample_matrix(x.height, factor)
    mx = _upsample_matrix(x.width, factor)
    out = my @ x.data @ mx.T
    return Tensor3(out)


def bilinear_upsample_backward(grad_out: Tensor3, in_h: int, in_w: int, factor: int) -> Tensor3:
    """Gradient of bilinear_upsample w.r.t. its input (transpose of the gather)."""
    if factor == 1:
        return grad_out.copy()
    if grad_out.height != in_h * factor or grad_out.width != in_w * factor:
        raise ContractError(
            f"grad_out shape {grad_out.shape} inconsistent with input ({in_h},{in_w}) x{factor}"
        )
    my = _upsample_matrix(in_h, factor)
    mx = _upsample_matrix(in_w, factor)
    return Tensor3(my.T @ grad_out.data @ mx)


def softmax_pairwise(logits: np.ndarray) -> np.ndarray:
    """Column-wise softmax over a length-2C vector viewed as 2 rows of C.

    The first C entries are the top-row logits, the remaining C the bottom
    row; each output column sums to 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size % 2 != 0:
        raise ContractError(f"expected a flat length-2C logit vector, got shape {logits.shape}")
    pairs = logits.reshape(2, -1)
    shifted = pairs - pairs.max(axis=0)
    e = np.exp(shifted)
    return e / e.sum(axis=0)


def relu(x: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(x.data, 0.0))


def relu_backward(x: Tensor3, grad_out: Tensor3) -> Tensor3:
    """Gradient of relu at pre-activation x; the subgradient at 0 is 0."""
    if grad_out.shape != x.shape:
        raise ContractError(f"shape mismatch {grad_out.shape} vs {x.shape}")
    return Tensor3(grad_out.data * (x.data > 0.0))


def max_pool2d(x: Tensor3, kernel: int) -> Tensor3:
    """Stride-1 sliding-window maximum with zero padding (same-size output)."""
    if kernel < 1:
        raise ContractError(f"pool kernel must be >= 1, got {kernel}")
    if kernel == 1:
        return x.copy()
    pl = (kernel - 1) // 2
    pr = kernel - 1 - pl
    padded = np.pad(x.data, ((0, 0), (pl, pr), (pl, pr)))
    win = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    return Tensor3(win.max(axis=(3, 4)))


def add(x: Tensor3, y: Tensor3) -> Tensor3:
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {y.shape}")
    return Tensor3(x.data + y.data)


def mul(x: Tensor3, y: Tensor3) -> Tensor3:
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {y.shape}")
    return Tensor3(x.data * y.data)


def scale(x: Tensor3, s: float) -> Tensor3:
    return Tensor3(x.data * float(s))


def concat_channels(x: Tensor3, y: Tensor3) -> Tensor3:
    if (x.height, x.width) != (y.height, y.width):
        raise ContractError(f"spatial mismatch {x.shape} vs {y.shape}")
    return Tensor3(np.concatenate([x.data, y.data], axis=0))
