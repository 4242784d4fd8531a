"""Parameter containers and the few dense layers shared by every stage."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm, relu


def linear(x, params, prefix, bias=True):
    y = x @ params[prefix + ".weight"]
    if bias:
        y = y + params[prefix + ".bias"]
    return y


def mlp2(x, params, prefix):
    """Linear -> ReLU -> Linear."""
    return linear(relu(linear(x, params, prefix + ".fc1")), params, prefix + ".fc2")


def affine_norm(x, params, prefix, eps=1e-5):
    return layer_norm(x, axis=-1, eps=eps) * params[prefix + ".gamma"] + params[prefix + ".beta"]


class ParamBuilder:
    """Accumulates named parameters in declaration order."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    def linear(self, prefix, fan_in, fan_out, bias=True, gain=1.0):
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        self.add(prefix + ".weight", self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        if bias:
            self.add(prefix + ".bias", np.zeros(fan_out))

    def mlp2(self, prefix, d_in, d_hidden, d_out):
        self.linear(prefix + ".fc1", d_in, d_hidden, gain=np.sqrt(2.0))
        self.linear(prefix + ".fc2", d_hidden, d_out)

    def norm(self, prefix, dim):
        self.add(prefix + ".gamma", np.ones(dim))
        self.add(prefix + ".beta", np.zeros(dim))


def frozen(params):
    """Constant copies of ``params``; evaluating with them records no tape."""
    return {k: Tensor(v.data) for k, v in params.items()}


def zero_grads(params):
    for p in params.values():
        p.grad = None


def count_parameters(params):
    return int(sum(p.size for p in params.values()))
