"""
Differentiable operations on `Tensor`.

Every op computes its forward value with numpy and registers a backward rule returning one
gradient per input (None where no gradient is needed). Broadcast inputs are reduced back to
their own shape by the tape.
"""

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cfld.common.errors import NumericError, ShapeError
from cfld.numkit.tensor import Tensor, as_tensor


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# --- elementwise arithmetic ---


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        "mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data)
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        "power",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op("exp", out, (a,), lambda g: (g * out,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor.from_op(
        "silu",
        a.data * sig,
        (a,),
        lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))

    def _backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor.from_op("gelu", 0.5 * x * (1.0 + t), (a,), _backward)


# --- reductions and shape ops ---


def sum(a, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), _backward)


def mean(a, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor.from_op(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    return Tensor.from_op("expand", data, (a,), lambda g: (g,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# --- linear algebra ---


def matmul(a, b) -> Tensor:
    """Batched matrix product a[..., m, k] @ b[..., k, n] with broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as err:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from err

    def _backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        grad_b = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return grad_a, grad_b

    return Tensor.from_op("matmul", a.data @ b.data, (a, b), _backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError(f"softmax: NaN in input of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op("softmax", out, (a,), _backward)


def standardize(a, axis: int | Sequence[int] = -1, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) along `axis`; the basis of layer and group norm."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * rstd

    def _backward(g):
        return (
            rstd
            * (
                g
                - g.mean(axis=axes, keepdims=True)
                - xhat * (g * xhat).mean(axis=axes, keepdims=True)
            ),
        )

    return Tensor.from_op("standardize", xhat, (a,), _backward)


# --- spatial ops ---


def conv2d(
    x,
    w,
    b=None,
    stride: int = 1,
    pad: int = 0,
    strict: bool = False,
) -> Tensor:
    """2-D cross-correlation of x[B,C,H,W] with w[O,C,kh,kw] plus bias b[O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = w.shape
    if channels != kernel_channels:
        raise ShapeError(
            f"conv2d: input has {channels} channels, kernel {w.shape} expects {kernel_channels}"
        )
    padded_h, padded_w = height + 2 * pad, width + 2 * pad
    if kh > padded_h or kw > padded_w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}")
    if strict and ((padded_h - kh) % stride or (padded_w - kw) % stride):
        raise ShapeError(
            f"conv2d: output extent is not integral for input {x.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    out_h = (padded_h - kh) // stride + 1
    out_w = (padded_w - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, Ho, Wo, C, kh, kw] -> rows of the im2col matrix
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * out_h * out_w, channels * kh * kw
    )
    w2 = w.data.reshape(out_channels, -1)
    out = (cols @ w2.T).reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, out_channels, 1, 1)
        parents = (x, w, b)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        grad_x = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(batch, out_h, out_w, channels, kh, kw)
            dxp = np.zeros((batch, channels, padded_h, padded_w), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = dxp[:, :, pad : pad + height, pad : pad + width]
        if b is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return Tensor.from_op("conv2d", np.ascontiguousarray(out), parents, _backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    batch, channels, height, width = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def _backward(g):
        return (g.reshape(batch, channels, height, factor, width, factor).sum(axis=(3, 5)),)

    return Tensor.from_op("upsample_nearest", out, (x,), _backward)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix [n_out, n_in] for half-pixel-centred bilinear resampling."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Resample x[B,C,H,W] to the spatial grid `size`; identity when already there."""
    x = as_tensor(x)
    if tuple(x.shape[2:]) == tuple(size):
        return x
    rows = bilinear_matrix(x.shape[2], size[0]).astype(x.dtype)
    cols = bilinear_matrix(x.shape[3], size[1]).astype(x.dtype)
    return Tensor.from_op(
        "resize_bilinear",
        rows @ x.data @ cols.T,
        (x,),
        lambda g: (rows.T @ g @ cols,),
    )


def _register_operators() -> None:
    Tensor.__add__ = add
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = sub
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = mul
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = div
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = neg
    Tensor.__pow__ = power
    Tensor.__matmul__ = matmul
    Tensor.sum = sum
    Tensor.mean = mean
    Tensor.reshape = lambda self, *shape: reshape(
        self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape
    )
    Tensor.transpose = lambda self, *axes: transpose(
        self, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else axes
    )


_register_operators()
