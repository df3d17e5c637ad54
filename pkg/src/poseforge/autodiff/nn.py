"""Layer containers over the tensor ops."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Owns named parameters, named buffers and child modules."""

    def __init__(self):
        self.training = True
        self._children = {}

    def add(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng, shape, fan_in, dtype):
    # Kaiming-uniform bound for ReLU networks
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, dtype=np.float32, bias=False):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)
