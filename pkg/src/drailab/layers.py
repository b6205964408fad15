"""Parameterized layers built on the autodiff ops."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class Module:
    """Base for layers and composites; discovers params via attribute scan."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if prefix else name
            if isinstance(value, Var) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{key}/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{key}/{i}/")

    def parameters(self) -> list[Var]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Var:
    return Var(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, nin, nout, rng, std=0.02, dtype=np.float32):
        self.w = _normal(rng, (nin, nout), std, dtype)
        self.b = Var(np.zeros(nout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride, pad, rng, std=0.02, dtype=np.float32):
        self.stride, self.pad = stride, pad
        self.w = _normal(rng, (cout, cin, k, k), std, dtype)
        self.b = Var(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride, pad, rng, std=0.02, dtype=np.float32):
        self.stride, self.pad = stride, pad
        self.w = _normal(rng, (cin, cout, k, k), std, dtype)
        self.b = Var(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d_transpose(x, self.w, self.b, stride=self.stride, pad=self.pad)


class InstanceNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Var(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Var(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.instance_norm2d(x, self.gamma, self.beta)


class MLP(Module):
    """Two-layer perceptron head: nin -> hidden (leaky relu) -> nout."""

    def __init__(self, nin, hidden, nout, rng, dtype=np.float32):
        self.fc1 = Linear(nin, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, nout, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ad.leaky_relu(self.fc1(x)))
