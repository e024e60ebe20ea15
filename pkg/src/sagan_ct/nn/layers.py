"""Parameterised layers and a minimal module container."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import Tensor

INIT_STD = 0.02


class Param(Tensor):
    """A trainable tensor carrying its own Adam moments and step counter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, requires_grad=True):
        super().__init__(data, requires_grad=requires_grad)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


class Module:
    """Container with named parameters, buffers and train/eval mode."""

    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data[...] = value
        for name, b in buffers.items():
            b[...] = np.asarray(state[name])

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.k = stride, padding, k
        self.weight = Param(rng.normal(0.0, INIT_STD, (cout, cin, k, k)).astype(dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, output_padding=0, bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.output_padding, self.k = stride, padding, output_padding, k
        self.weight = Param(rng.normal(0.0, INIT_STD, (cin, cout, k, k)).astype(dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.output_padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.momentum, self.eps = momentum, eps
        self.gamma = Param(rng.normal(1.0, INIT_STD, c).astype(dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x):
        return F.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


def recompute_batchnorm_stats(module: Module, batches):
    """Replace running statistics by the exact average over ``batches``.

    Each batch is run in training mode with a cumulative-average momentum, so
    the result does not depend on the order of the batches' arrival beyond
    float rounding. Parameters are untouched. Returns the module in eval mode.
    """
    norms = [m for m in _walk(module) if isinstance(m, BatchNorm2d)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.running_mean[...] = 0
        m.running_var[...] = 0
    module.train()
    try:
        for k, batch in enumerate(batches):
            for m in norms:
                m.momentum = 1.0 / (k + 1)
            module(batch)
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
    return module.eval()


def _walk(module):
    yield module
    for _, child in module.children():
        yield from _walk(child)
