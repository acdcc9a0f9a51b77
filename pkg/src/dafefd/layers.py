"""Stateful layer wrappers around the functional ops in :mod:`dafefd.engine`.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients during ``backward``. A layer instance is
used once per forward pass.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import engine
from .engine import ConvSpec, Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, dilation=1, rng=None, init_gain=1.0):
        self.spec = ConvSpec(in_ch, out_ch, kernel, stride, padding, dilation)
        if rng is not None:
            engine.he_init(self.spec, rng, init_gain)
        self._x = None
        self._cols = None

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.spec.weight
        yield prefix + "bias", self.spec.bias

    @property
    def weight(self) -> Tensor:
        return self.spec.weight

    @property
    def bias(self) -> Tensor:
        return self.spec.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        kh, kw = self.spec.kernel
        if kh * kw > 1 or self.spec.stride > 1 or self.spec.padding:
            engine._check_conv_input(x, self.spec)
            self._cols, _, _ = engine.im2col(x, self.spec)
        else:
            self._cols = None
        return engine.conv2d(x, self.spec, cols=self._cols)

    def backward(self, g: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        dx, dw, db = engine.conv2d_backward(
            self._x, self.spec, g, cols=self._cols, need_input_grad=need_input_grad
        )
        self.spec.weight.accumulate(dw)
        self.spec.bias.accumulate(db)
        self._x = self._cols = None
        return dx


class ReLU(Module):
    def __init__(self):
        self._out = None

    def forward(self, x):
        self._out = engine.relu(x)
        return self._out

    def backward(self, g):
        return engine.relu_backward(self._out, g)


class MaxPool2(Module):
    def __init__(self):
        self._shape = None
        self._arg = None

    def forward(self, x):
        self._shape = x.shape
        out, self._arg = engine.maxpool2(x)
        return out

    def backward(self, g):
        return engine.maxpool2_backward(self._shape, self._arg, g)


class ConvReLU(Module):
    """Convolution followed by relu."""

    def __init__(self, in_ch, out_ch, kernel=3, padding=1, dilation=1, rng=None):
        self.conv = Conv2d(in_ch, out_ch, kernel, 1, padding, dilation, rng)
        self._act = ReLU()

    def forward(self, x):
        return self._act.forward(self.conv.forward(x))

    def backward(self, g, need_input_grad=True):
        return self.conv.backward(self._act.backward(g), need_input_grad)
