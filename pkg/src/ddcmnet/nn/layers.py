"""Stateful layers: parameter ownership, initialization, train/eval mode."""

from __future__ import annotations

import math

import numpy as np

from ..rng import RngState
from ..tensor import Tensor
from . import functional as F


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container: parameters, buffers and children are discovered from attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key in getattr(self, "_buffer_names", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {target.shape}")
            target[...] = value


def kaiming(rng: RngState, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, dilation=1,
                 padding=None, bias=True, rng: RngState | None = None):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.spec = F.ConvSpec(in_channels, out_channels, kernel, stride, dilation, padding, bias)
        rng = rng or RngState(0)
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        s = self.spec
        return F.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, init=0.25):
        self.weight = Parameter(np.asarray(init, dtype=np.float64))

    def forward(self, x):
        return F.prelu(x, self.weight)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng: RngState | None = None):
        rng = rng or RngState(0)
        self.weight = Parameter(kaiming(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)
