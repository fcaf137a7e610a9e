"""Parameter-holding layers on top of the tensor ops.

Each layer exposes params() -> dict of trainable tensors; composites merge
child dicts under dotted prefixes so checkpoints get stable flat names.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .tensor import Tensor


def prefix_params(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype, scale: float = 1.0):
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d:
    """1-D convolution with optional asymmetric padding and grouping."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32, stride: int = 1, dilation: int = 1, groups: int = 1,
                 pad: int | tuple[int, int] = 0, bias: bool = True, init_scale: float = 1.0):
        fan_in = (c_in // groups) * kernel
        self.w = Tensor(_uniform(rng, (c_out, c_in // groups, kernel), fan_in, dtype, init_scale),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        if isinstance(self.pad, tuple):
            if self.pad != (0, 0):
                x = tc.pad1d(x, *self.pad)
            sym = 0
        else:
            sym = self.pad
        return tc.conv1d(x, self.w, self.b, stride=self.stride, dilation=self.dilation,
                         padding=sym, groups=self.groups)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class ConvTranspose1d:
    """Transposed 1-D convolution upsampling by exactly `stride`."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        fan_in = c_in * kernel
        self.w = Tensor(_uniform(rng, (c_in, c_out, kernel), fan_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv1d_transpose(x, self.w, self.b, stride=self.stride)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float32,
                 stride: tuple[int, int] = (1, 1), pad: tuple[int, int] = (0, 0),
                 bias: bool = True):
        kh, kw = kernel
        fan_in = c_in * kh * kw
        self.w = Tensor(_uniform(rng, (c_out, c_in, kh, kw), fan_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class Linear:
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, init_scale: float = 1.0):
        self.w = Tensor(_uniform(rng, (f_out, f_in), f_in, dtype, init_scale), requires_grad=True)
        self.b = Tensor(np.zeros(f_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.w, self.b)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out
