"""Parameter-holding layers over the tensor operators.

A :class:`Layer` owns learnable :class:`~lfyolo.tensor.Tensor` parameters,
non-learnable buffers (batch-norm running statistics), and child layers, all
addressable by dotted paths such as ``backbone.s3.conv1.conv.weight``.

Every layer can also ``trace`` an input shape without touching data; the
complexity analyzer relies on this to count parameters and MACs at full
resolution in constant time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class TraceRow:
    """One leaf layer of a shape trace."""

    layer: str
    type: str
    c_in: int
    c_out: int
    kernel: int = 0
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    weights: int = 0
    bias: int = 0
    bn_affine: int = 0
    bn_stats: int = 0
    macs: int = 0

    @property
    def params(self) -> int:
        return self.weights + self.bias + self.bn_affine + self.bn_stats


class Layer:
    """Minimal module container: parameters, buffers, children, train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Layer):
            self._children[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        object.__setattr__(self, name, layer)
        return layer

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        return iter(self._children.items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_layers(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        for name, child in self._children.items():
            path = prefix + name
            yield path, child
            yield from child.named_layers(path + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy values in place; caller is responsible for validating names and dims."""
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=np.float64).reshape(p.shape)
        for name, b in self.named_buffers():
            b[...] = np.asarray(state[name], dtype=np.float64).reshape(b.shape)

    def num_elements(self) -> int:
        return sum(v.size for v in self.state_dict().values())

    def train(self, mode: bool = True) -> "Layer":
        object.__setattr__(self, "training", mode)
        for _, child in self._children.items():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def trace(self, shape: tuple, rows: list[TraceRow], prefix: str) -> tuple:
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int | None = None,
                 dilation: int = 1, groups: int = 1, bias: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigError(f"conv {c_in}->{c_out} channels not divisible by {groups} groups")
        if padding is None:
            if kernel % 2 == 0:
                raise ConfigError(f"same padding needs an odd kernel, got {kernel}")
            padding = dilation * (kernel - 1) // 2
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        rng = rng or np.random.default_rng(0)
        shape = (c_out, c_in // groups, kernel, kernel)
        self.weight = Tensor(_kaiming(rng, shape, shape[1] * kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} input channels, got {x.shape[1]}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def trace(self, shape, rows, prefix):
        n, c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"{prefix}: expects {self.c_in} input channels, got {c}")
        ho = T.conv_output_size(h, self.kernel, self.stride, self.padding, self.dilation)
        wo = T.conv_output_size(w, self.kernel, self.stride, self.padding, self.dilation)
        weights = self.weight.size
        rows.append(TraceRow(prefix, "conv_dw" if self.groups > 1 else "conv", c, self.c_out, self.kernel,
                             self.stride, self.dilation, self.groups, weights=weights,
                             bias=0 if self.bias is None else self.c_out, macs=weights * ho * wo))
        return (n, self.c_out, ho, wo)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.eps, self.training, self.momentum)

    def trace(self, shape, rows, prefix):
        c = shape[1]
        rows.append(TraceRow(prefix, "bn", c, c, bn_affine=2 * c, bn_stats=2 * c))
        return shape


class MaxPool(Layer):
    def __init__(self, kernel: int, stride: int | None = None, padding: int | str = 0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return T.maxpool2d(x, self.kernel, self.stride, self.padding)

    def _geometry(self):
        if self.padding == "same":
            return 1, (self.kernel - 1) // 2
        return (self.stride or self.kernel), self.padding

    def trace(self, shape, rows, prefix):
        n, c, h, w = shape
        s, p = self._geometry()
        ho, wo = (h + 2 * p - self.kernel) // s + 1, (w + 2 * p - self.kernel) // s + 1
        rows.append(TraceRow(prefix, "maxpool", c, c, self.kernel, s))
        return (n, c, ho, wo)
