"""Parameter containers and the basic layers the backbone is assembled from."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .engine import Tensor, default_dtype, ops


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name).

    Keying on the name keeps a layer's initial weights independent of which
    other layers exist, so adding an attention block never perturbs the
    backbone's initialization.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class Module:
    """Tree of named parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def named_children(self):
        return self._children.items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = (set(own_params) | set(own_buffers)) - set(state)
        unexpected = set(state) - set(own_params) - set(own_buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own_params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
        for name, b in own_buffers.items():
            arr = state[name]
            if arr.shape != b.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {b.shape}")
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=default_dtype())


class Conv2d(Module):
    """Bias-free convolution with He (fan-out) initialization."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 *, seed: int = 0, name: str = "conv", bias: bool = False):
        super().__init__()
        self.stride, self.pad, self.k = stride, pad, k
        self.cin, self.cout = cin, cout
        std = np.sqrt(2.0 / (cout * k * k))
        self.weight = _param(param_rng(seed, name + ".weight").standard_normal((cout, cin, k, k)) * std)
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def out_shape(self, shape):
        c, h, w = shape
        return (self.cout,
                ops.conv_output_size(h, self.k, self.stride, self.pad),
                ops.conv_output_size(w, self.k, self.stride, self.pad))


class BatchNorm(Module):
    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, *, affine_bias: bool = True):
        super().__init__()
        self.channels = channels
        self.weight = _param(np.ones(channels))
        if affine_bias:
            self.bias = _param(np.zeros(channels))
        else:
            # frozen shift, as in the BNNeck of the strong re-id baseline
            object.__setattr__(self, "bias", Tensor(np.zeros(channels)))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.MOMENTUM, self.EPS)


class Linear(Module):
    """Affine map with weight stored input-major (in x out)."""

    def __init__(self, cin: int, cout: int, *, bias: bool = True, seed: int = 0,
                 name: str = "linear", std: float | None = None):
        super().__init__()
        rng = param_rng(seed, name + ".weight")
        if std is None:
            bound = 1.0 / np.sqrt(cin)
            w = rng.uniform(-bound, bound, size=(cin, cout))
        else:
            w = rng.standard_normal((cin, cout)) * std
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
