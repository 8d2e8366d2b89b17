"""Parameters, modules and seeded initialization."""

from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from dsem_lab import tensor as T
from dsem_lab.tensor import Tensor


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent PRNG stream derived from a run seed.

    Uses numpy's PCG64 (a 128-bit permuted LCG) seeded through SeedSequence
    with ``(seed, crc32(name))`` so each consumer gets its own sequence no
    matter how many draws the others make.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key])))


class Parameter(Tensor):
    """A learnable leaf tensor with a momentum buffer for SGD."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = ""):
        arr = np.array(data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(T.DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)


class Module:
    """Container whose Parameters and sub-Modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            full = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self, prefix: str = "") -> list[Parameter]:
        out = []
        for name, p in self.named_parameters(prefix):
            p.name = name
            out.append(p)
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        own = dict(self.named_parameters(prefix))
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {', '.join(missing)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} does not match model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.momentum_buffer = np.zeros_like(p.data)
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class Conv2d(Module):
    """k×k convolution with Kaiming-uniform (fan-in, ReLU gain) weights and zero bias."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
    ):
        fan_in = in_ch * k * k
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(T.DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(out_ch, dtype=T.DEFAULT_DTYPE))
        self.stride = stride
        self.dilation = dilation
        # "same" padding for stride 1 by default
        self.padding = dilation * (k - 1) // 2 if padding is None else padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
