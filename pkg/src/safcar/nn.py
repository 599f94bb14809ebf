"""Parameter containers and the small set of layers the pathways are built from."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Base class; parameters are tensor attributes, children are module attributes.

    Attribute order is registration order, which fixes the parameter registry
    order used by checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters() if v.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, d_out)
        if bias:
            self.bias = zeros((d_out,))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones((d,))
        self.beta = zeros((d,))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Conv1d(Module):
    """Kernels ``[C_out, C_in, k]``; input ``[B, C_in, T]``."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        self.weight = uniform_init(rng, (c_out, c_in, k), c_in * k, c_out * k)
        self.bias = zeros((c_out,))
        self._stride = stride
        self._pad = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class Conv2d(Module):
    """Kernels ``[kh, kw, C_in, C_out]``; channels-last input ``[N, H, W, C_in]``."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        self.weight = uniform_init(rng, (k, k, c_in, c_out), c_in * k * k, c_out * k * k)
        self.bias = zeros((c_out,))
        self._stride = stride
        self._pad = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)
