"""Minimal module/parameter containers and the basic layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)


class Module:
    """Container tracking parameters, numpy buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params, modules, buffers = self._params, self._modules, self._buffers
        for d in (params, modules, buffers):
            d.pop(name, None)
        if isinstance(value, Parameter):
            params[name] = value
        elif isinstance(value, Module):
            modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        object.__setattr__(self, name, value)
        self._buffers[name] = value

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        object.__setattr__(self, name, value)
        self._buffers[name] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ---------------------------------------------------------
    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}.{name}" if prefix else name)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        self._collect_state("", out)
        return out

    def _collect_state(self, prefix, out):
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, b in self._buffers.items():
            out[prefix + name] = b
        for name, m in self._modules.items():
            m._collect_state(f"{prefix}{name}.", out)

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"tensor {name!r}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        dt = np.dtype(dtype)
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dt)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m._set_buffer(name, b.astype(dt))
        return self

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def __setitem__(self, i: int, m: Module) -> None:
        setattr(self, str(i), m)

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(list(self._modules.values()))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# -- layers -------------------------------------------------------------------
class Conv2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=None, groups=1, bias=True, rng=None):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        if cin % groups or cout % groups:
            raise ShapeError(f"channels {cin}->{cout} not divisible by groups={groups}")
        self.stride = F._pair(stride)
        self.padding = ((kh - 1) // 2, (kw - 1) // 2) if padding is None else F._pair(padding)
        self.groups = groups
        fan_in = (cin // groups) * kh * kw
        w = _rng(rng).normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin // groups, kh, kw))
        self.weight = Parameter(w.astype(np.float32))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def params(self) -> F.ConvParams:
        return F.ConvParams(self.weight, self.bias, self.stride, self.padding, self.groups)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def params(self) -> F.BnParams:
        return F.BnParams(self.weight, self.bias, self.running_mean, self.running_var, self.eps, self.momentum)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.eps, self.momentum, self.training,
        )


class ConvBN(Module):
    """Bias-free convolution followed by batch norm."""

    def __init__(self, cin, cout, kernel_size, stride=1, groups=1, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel_size, stride, None, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng=None):
        super().__init__()
        w = _rng(rng).normal(0.0, math.sqrt(2.0 / (fin + fout)), (fin, fout))
        self.weight = Parameter(w.astype(np.float32))
        self.bias = Parameter(np.zeros(fout, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        if channels % reduction:
            raise ShapeError(f"SE channels {channels} not divisible by reduction {reduction}")
        rng = _rng(rng)
        hidden = channels // reduction
        self.fc1 = Parameter(rng.normal(0.0, math.sqrt(2.0 / channels), (channels, hidden)).astype(np.float32))
        self.fc2 = Parameter(rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, channels)).astype(np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.se_block(x, self.fc1, self.fc2)
