"""Parameter registry and the handful of layers the networks are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, relu


class Module:
    """Ordered registry of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for c in self._children.values():
            yield from c.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def he_uniform(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, dilation=1, bias=True):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.pad = dilation * (k // 2) if pad is None else pad
        self.weight = self.param("weight", he_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.param("bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride, rng):
        super().__init__()
        self.stride = stride
        fan_in = max(1.0, cin * k * k / (stride * stride))
        self.weight = self.param("weight", he_uniform(rng, (cin, cout, k, k), fan_in))
        self.bias = self.param("bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.running_mean = self.buffer("running_mean", np.zeros(channels))
        self.running_var = self.buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng):
        super().__init__()
        self.weight = self.param("weight", he_uniform(rng, (fan_out, fan_in), fan_in))
        self.bias = self.param("bias", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k, rng, stride=1, dilation=1, act=True):
        super().__init__()
        self.act = act
        self.conv = self.child("conv", Conv2d(cin, cout, k, rng, stride=stride, dilation=dilation,
                                              bias=False))
        self.bn = self.child("bn", BatchNorm(cout))

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.act else y
