"""Minimal layer/parameter plumbing on top of the tensor engine."""

import numpy as np

from .config import default_dtype
from .tensor import Tensor, conv2d, layernorm, linear


def trunc_normal(rng, shape, std=0.02):
    """Truncated-normal init: samples clipped to +/- 2 std."""
    return np.clip(rng.standard_normal(shape), -2.0, 2.0).astype(default_dtype()) * std


class Module:
    """Base with recursive, deterministically ordered parameter discovery."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.w = Tensor(trunc_normal(rng, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=default_dtype()), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return layernorm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, bias=True):
        self.w = Tensor(trunc_normal(rng, (c_out, c_in, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.w, self.b)
