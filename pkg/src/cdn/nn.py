"""Parameter containers and the layers the network is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Param, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


class Module:
    """Tree of named parameters and buffers with a train/eval switch.

    Children, params and buffers are discovered from instance attributes in
    definition order, so names are stable across runs.
    """

    def __init__(self) -> None:
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                p.data = np.asarray(arr, dtype=p.dtype).reshape(p.shape).copy()
                p.zero_grad()
            elif name in bufs:
                bufs[name][...] = np.asarray(arr).reshape(bufs[name].shape)
            else:
                raise KeyError(f"unexpected state entry {name!r}")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used by gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for mod in self.modules():
            for key in getattr(mod, "_buffers", ()):
                setattr(mod, key, getattr(mod, key).astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 2.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(np.float32)


class Conv2d(Module):
    """Stride-1 'same' convolution; ``kernel`` is 3 for body layers, 1 for heads."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, *, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        super().__init__()
        shape = (cout, cin, kernel, kernel)
        self.weight = Param(np.zeros(shape, np.float32) if zero_init else kaiming_normal(rng, shape))
        self.bias = Param(np.zeros(cout, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.gamma = Param(np.ones(channels, np.float32))
        self.beta = Param(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, groups: int = 1) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                self.training, self.eps, self.momentum, groups)


class PReLU(Module):
    def __init__(self, channels: int, init: float = PRELU_INIT):
        super().__init__()
        self.slope = Param(np.full(channels, init, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.slope)
