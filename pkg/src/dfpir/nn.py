"""Restormer-style building blocks on top of :mod:`dfpir.tensor`.

Modules hold their parameters as attributes; ``named_parameters`` walks the
attribute tree in definition order, which gives every parameter a unique,
stable dotted name (used by checkpoints and the gradient harness).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Init:
    """Fan-in scaled uniform initializer drawing from one seeded stream."""

    def __init__(self, seed: int, purpose: str = "init", index: int = 0, dtype=np.float32):
        self.rng = Rng(seed, purpose, index)
        self.dtype = dtype

    def uniform(self, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, shape).astype(self.dtype)
        return Tensor(data, requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ValueError(f"parameter {name} is registered twice")
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value._walk(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for f64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = params.keys() - state.keys()
        extra = state.keys() - params.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)


# ---------------------------------------------------------------------------
# primitive layers

class Conv1x1(Module):
    def __init__(self, init: Init, cin: int, cout: int, bias: bool = True):
        self.weight = init.uniform((cout, cin), cin)
        self.bias = init.zeros((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_pointwise(x, self.weight, self.bias)


class DWConv3x3(Module):
    def __init__(self, init: Init, channels: int, bias: bool = True):
        self.weight = init.uniform((channels, 3, 3), 9)
        self.bias = init.zeros((channels,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_depthwise3x3(x, self.weight, self.bias)


class Conv3x3(Module):
    def __init__(self, init: Init, cin: int, cout: int, bias: bool = True):
        self.weight = init.uniform((cout, cin, 3, 3), cin * 9)
        self.bias = init.zeros((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3x3(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, init: Init, cin: int, cout: int):
        self.weight = init.uniform((cout, cin), cin)
        self.bias = init.zeros((cout,))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm2d(Module):
    def __init__(self, init: Init, channels: int, eps: float = 1e-6):
        self.weight = init.ones((channels,))
        self.bias = init.zeros((channels,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.weight, self.bias, self.eps)


# ---------------------------------------------------------------------------
# transformer pieces

class MDTA(Module):
    """Multi-head transposed attention: attention maps are C/h x C/h per head."""

    def __init__(self, init: Init, dim: int, heads: int = 1):
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.qkv = Conv1x1(init, dim, 3 * dim)
        self.qkv_dw = DWConv3x3(init, 3 * dim)
        self.temperature = init.ones((heads, 1, 1))
        self.project_out = Conv1x1(init, dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.dim:
            raise T.ShapeError(f"MDTA built for {self.dim} channels, got {c}")
        hd = self.heads
        q, k, v = T.split(self.qkv_dw(self.qkv(x)), [c, c, c], axis=1)
        q = T.l2_normalize(T.reshape(q, (b, hd, c // hd, h * w)))
        k = T.l2_normalize(T.reshape(k, (b, hd, c // hd, h * w)))
        v = T.reshape(v, (b, hd, c // hd, h * w))
        attn = T.mul(T.matmul(q, T.transpose_last(k)), self.temperature)
        attn = T.softmax(attn, axis=-1)
        out = T.reshape(T.matmul(attn, v), (b, c, h, w))
        return self.project_out(out)


class GDFN(Module):
    """Gated depthwise feed-forward: gelu(branch1) * branch2, projected back."""

    def __init__(self, init: Init, dim: int, expansion: float = 2.0):
        if expansion <= 0:
            raise ValueError("FFN expansion must be positive")
        hidden = int(dim * expansion)
        self.hidden = hidden
        self.project_in = Conv1x1(init, dim, 2 * hidden)
        self.dwconv = DWConv3x3(init, 2 * hidden)
        self.project_out = Conv1x1(init, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = T.split(self.dwconv(self.project_in(x)), [self.hidden, self.hidden], axis=1)
        return self.project_out(T.mul(T.gelu(x1), x2))


class TransformerBlock(Module):
    def __init__(self, init: Init, dim: int, heads: int = 1, expansion: float = 2.0):
        self.norm1 = LayerNorm2d(init, dim)
        self.attn = MDTA(init, dim, heads)
        self.norm2 = LayerNorm2d(init, dim)
        self.ffn = GDFN(init, dim, expansion)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.ffn(self.norm2(x)))


class Downsample(Module):
    """C -> 2C at half resolution: 1x1 conv to C/2, then pixel unshuffle."""

    def __init__(self, init: Init, dim: int):
        if dim % 2:
            raise ValueError(f"downsample needs an even channel count, got {dim}")
        self.conv = Conv1x1(init, dim, dim // 2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise T.ShapeError(f"downsample needs even spatial dims, got {x.shape[2:]}")
        return T.pixel_unshuffle(self.conv(x), 2)


class Upsample(Module):
    """C -> C/2 at double resolution: 1x1 conv to 2C, then pixel shuffle."""

    def __init__(self, init: Init, dim: int):
        if dim % 2:
            raise ValueError(f"upsample needs an even channel count, got {dim}")
        self.conv = Conv1x1(init, dim, dim * 2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.pixel_shuffle(self.conv(x), 2)


class SkipFuse(Module):
    """Concatenate decoder and skip features (2C) and reduce back to C."""

    def __init__(self, init: Init, dim: int):
        self.reduce = Conv1x1(init, 2 * dim, dim)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        if dec.shape != skip.shape:
            raise T.ShapeError(f"skip_fuse shape mismatch {dec.shape} vs {skip.shape}")
        return self.reduce(T.concat([dec, skip], axis=1))


def zero_output_projections(module: Module) -> None:
    """Zero the last projection of every attention/FFN so residual blocks become identities."""
    for _, m in _iter_modules(module):
        if isinstance(m, (MDTA, GDFN)):
            m.project_out.weight.data[...] = 0
            m.project_out.bias.data[...] = 0


def _iter_modules(module: Module, prefix: str = ""):
    yield prefix, module
    for name, child in module._children():
        if isinstance(child, Module):
            yield from _iter_modules(child, f"{prefix}{name}.")
