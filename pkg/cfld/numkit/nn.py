"""
Parameter containers and the layers the models are assembled from.

Modules discover parameters through their attributes, so dotted names follow attribute
paths, e.g. `unet.up_blocks.0.layers.0.transformer.layer.cross_attn.to_k.weight`.
"""

import math
from typing import Iterator

import numpy as np

from cfld.common.errors import ShapeError
from cfld.numkit import ops
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, default_dtype, is_shape_only


class Parameter(Tensor):
    """Leaf tensor owned by a module; trainable unless frozen by a partition."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Buffer(Tensor):
    """Persistent non-trainable state saved alongside parameters."""


def _placeholder(shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(np.zeros((), dtype=default_dtype()), shape)


def init_normal(rng: Rng, shape: tuple[int, ...], std: float) -> np.ndarray:
    if is_shape_only():
        return _placeholder(shape)
    return np.asarray(rng.normal(shape), dtype=np.float64) * std


def init_constant(shape: tuple[int, ...], value: float) -> np.ndarray:
    if is_shape_only():
        return _placeholder(shape)
    return np.full(shape, value, dtype=default_dtype())


class Module:
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    yield f"{name}.{index}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, value in self._children():
            if isinstance(value, Buffer):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def set_requires_grad(self, flag: bool) -> None:
        for parameter in self.parameters().values():
            parameter.requires_grad = flag

    def zero_grad(self) -> None:
        for parameter in self.parameters().values():
            parameter.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = dict(self.named_parameters())
        tensors.update(self.named_buffers())
        missing = sorted(set(tensors) - set(state))
        if missing:
            raise KeyError(f"Missing tensors in state: {missing[:5]}")
        for name, tensor in tensors.items():
            array = np.asarray(state[name], dtype=tensor.dtype)
            if array.shape != tensor.shape:
                raise ShapeError(
                    f"State tensor {name} has shape {array.shape}, expected {tensor.shape}"
                )
            tensor.data = array.copy()


class Linear(Module):
    """y = x @ W + b with W of shape [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(
            init_constant((in_dim, out_dim), 0.0) if zero else init_normal(rng, (in_dim, out_dim), std)
        )
        self.bias = Parameter(init_constant((out_dim,), 0.0)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    """Square-kernel convolution; `zero=True` gives a zero convolution (weight and bias 0)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: Rng,
        stride: int = 1,
        pad: int | None = None,
        zero: bool = False,
    ):
        shape = (out_channels, in_channels, kernel, kernel)
        if zero:
            self.weight = Parameter(init_constant(shape, 0.0))
        else:
            self.weight = Parameter(init_normal(rng, shape, 1.0 / math.sqrt(in_channels * kernel * kernel)))
        self.bias = Parameter(init_constant((out_channels,), 0.0))
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(init_constant((dim,), 1.0))
        self.bias = Parameter(init_constant((dim,), 0.0))

    def forward(self, x: Tensor) -> Tensor:
        return ops.standardize(x, -1) * self.weight + self.bias


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ShapeError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = Parameter(init_constant((channels,), 1.0))
        self.bias = Parameter(init_constant((channels,), 0.0))

    def forward(self, x: Tensor) -> Tensor:
        batch, channels, height, width = x.shape
        grouped = ops.standardize(x.reshape(batch, self.groups, -1), -1)
        x = grouped.reshape(batch, channels, height, width)
        return x * self.weight.reshape(1, channels, 1, 1) + self.bias.reshape(1, channels, 1, 1)


def to_tokens(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C]"""
    batch, channels, height, width = x.shape
    return x.reshape(batch, channels, height * width).transpose(0, 2, 1)


def to_map(tokens: Tensor, height: int, width: int) -> Tensor:
    """[B, H*W, C] -> [B, C, H, W]"""
    batch, _, channels = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(batch, channels, height, width)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v per head; returns (output [B,N,inner], probs [B,h,N,M])."""
    batch, n_queries, inner = q.shape
    n_keys = k.shape[1]
    if inner % heads:
        raise ShapeError(f"attention: width {inner} not divisible by {heads} heads")
    if k.shape[-1] != inner or v.shape[-1] != inner:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} widths differ")
    head_dim = inner // heads
    qh = q.reshape(batch, n_queries, heads, head_dim).transpose(0, 2, 1, 3)
    kh = k.reshape(k.shape[0], n_keys, heads, head_dim).transpose(0, 2, 3, 1)
    vh = v.reshape(v.shape[0], n_keys, heads, head_dim).transpose(0, 2, 1, 3)
    probs = ops.softmax(ops.matmul(qh, kh) * (1.0 / math.sqrt(head_dim)), axis=-1)
    out = ops.matmul(probs, vh).transpose(0, 2, 1, 3).reshape(batch, n_queries, inner)
    return out, probs


class Attention(Module):
    """Multi-head attention with optional query bias and key-only positional signal."""

    def __init__(self, query_dim: int, context_dim: int, heads: int, rng: Rng):
        self.heads = heads
        self.to_q = Linear(query_dim, query_dim, rng, bias=False)
        self.to_k = Linear(context_dim, query_dim, rng, bias=False)
        self.to_v = Linear(context_dim, query_dim, rng, bias=False)
        self.to_out = Linear(query_dim, query_dim, rng)
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None

    def forward(
        self,
        x: Tensor,
        context: Tensor | None = None,
        query_bias: Tensor | None = None,
        key_pos: Tensor | None = None,
    ) -> Tensor:
        context = x if context is None else context
        q = self.to_q(x)
        if query_bias is not None:
            q = q + query_bias
        k = self.to_k(context if key_pos is None else context + key_pos)
        v = self.to_v(context)
        out, probs = attend(q, k, v, self.heads)
        if self.keep_attention:
            self.last_attention = probs.data.copy()
        return self.to_out(out)


class FeedForward(Module):
    def __init__(self, dim: int, rng: Rng, mult: int = 4):
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Self-attention, optional cross-attention, feed-forward.

    Pre-norm (default) normalises each sublayer input; post-norm normalises after each residual sum.
    """

    def __init__(self, dim: int, heads: int, rng: Rng, context_dim: int | None = None, prenorm: bool = True):
        self.prenorm = prenorm
        self.norm1 = LayerNorm(dim)
        self.self_attn = Attention(dim, dim, heads, rng)
        if context_dim is not None:
            self.norm2 = LayerNorm(dim)
            self.cross_attn = Attention(dim, context_dim, heads, rng)
        else:
            self.norm2 = None
            self.cross_attn = None
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def cross(self, x: Tensor, context: Tensor, query_bias: Tensor | None, key_pos: Tensor | None) -> Tensor:
        return self.cross_attn(x, context, query_bias=query_bias, key_pos=key_pos)

    def forward(
        self,
        x: Tensor,
        context: Tensor | None = None,
        query_bias: Tensor | None = None,
        key_pos: Tensor | None = None,
    ) -> Tensor:
        if self.cross_attn is not None and context is None:
            raise ShapeError("TransformerLayer: cross-attention layer called without context")
        if self.prenorm:
            x = x + self.self_attn(self.norm1(x))
            if self.cross_attn is not None:
                x = x + self.cross(self.norm2(x), context, query_bias, key_pos)
            return x + self.ff(self.norm3(x))
        x = self.norm1(x + self.self_attn(x))
        if self.cross_attn is not None:
            x = self.norm2(x + self.cross(x, context, query_bias, key_pos))
        return self.norm3(x + self.ff(x))


class ResBlock(Module):
    """GroupNorm/SiLU/conv residual block, optionally time-conditioned by adaptive norm."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: Rng,
        groups: int = 8,
        time_dim: int | None = None,
    ):
        self.norm1 = GroupNorm(groups, in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.norm2 = GroupNorm(groups, out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        if time_dim is not None:
            self.time_scale = Linear(time_dim, out_channels, rng, zero=True)
            self.time_shift = Linear(time_dim, out_channels, rng, zero=True)
        else:
            self.time_scale = None
            self.time_shift = None
        self.skip = Conv2d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.time_scale is not None and temb is not None:
            batch, channels = h.shape[:2]
            emb = ops.silu(temb)
            scale = self.time_scale(emb).reshape(batch, channels, 1, 1)
            shift = self.time_shift(emb).reshape(batch, channels, 1, 1)
            h = h * (scale + 1.0) + shift
        h = self.conv2(ops.silu(h))
        return (x if self.skip is None else self.skip(x)) + h
