"""Trainable layers built on the tensor primitives.

Modules hold named Parameters (trainable) and Buffers (running statistics).
Names are dotted paths fixed at construction so checkpoints are stable and
optimizer state can be matched back up after a reload.
"""

from __future__ import annotations

import numpy as np

from . import tensor as dt


class Parameter:
    """A named trainable tensor."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = dt.Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


class Buffer:
    """A named non-trainable array (running statistics)."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = np.array(data, dtype=np.float64)


class Module:
    """Base class: walks its attributes to enumerate parameters and buffers."""

    def _children(self):
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def parameters(self) -> list[Parameter]:
        out = []
        for value in self.__dict__.values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, (list, tuple)):
                out.extend(v for v in value if isinstance(v, Parameter))
        for child in self._children():
            out.extend(child.parameters())
        return out

    def buffers(self) -> list[Buffer]:
        out = []
        for value in self.__dict__.values():
            if isinstance(value, Buffer):
                out.append(value)
            elif isinstance(value, (list, tuple)):
                out.extend(v for v in value if isinstance(v, Buffer))
        for child in self._children():
            out.extend(child.buffers())
        return out

    def set_training(self, flag: bool) -> None:
        # instance-dict check: class-level `training` properties stay read-only
        if "training" in self.__dict__:
            self.training = bool(flag)
        for child in self._children():
            child.set_training(flag)


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    """y = x @ W + b for row-major feature matrices (n, in_features)."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(f"{name}.weight",
                                glorot(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features)) if bias else None

    def __call__(self, x: dt.Tensor) -> dt.Tensor:
        y = dt.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = dt.add(y, self.bias.tensor)
        return y


class BatchNorm(Module):
    """Batch normalization over rows of an (n, C) matrix.

    `real_rows` restricts the statistics (and the stat gradients) to genuine
    rows, so zero-padded slots in packed point buffers cannot skew them.
    Inference normalizes with running statistics; an all-padded training
    batch falls back to the running statistics as well.
    """

    def __init__(self, name: str, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = Buffer(f"{name}.running_mean", np.zeros(num_features))
        self.running_var = Buffer(f"{name}.running_var", np.ones(num_features))

    def __call__(self, x: dt.Tensor, real_rows=None) -> dt.Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ValueError(f"BatchNorm expects (n, {self.num_features}), got {x.shape}")
        use_batch_stats = self.training
        if use_batch_stats:
            sel = dt.gather_rows(x, real_rows) if real_rows is not None else x
            if sel.shape[0] == 0:
                use_batch_stats = False
        if use_batch_stats:
            mu = dt.mean_(sel, axis=0)
            centered = dt.sub(sel, mu)
            var = dt.mean_(dt.mul(centered, centered), axis=0)
            m = self.momentum
            self.running_mean.value = (1.0 - m) * self.running_mean.value + m * mu.data
            self.running_var.value = (1.0 - m) * self.running_var.value + m * var.data
            xhat = dt.div(dt.sub(x, mu), dt.sqrt(dt.add(var, self.eps)))
        else:
            denom = np.sqrt(self.running_var.value + self.eps)
            xhat = dt.div(dt.sub(x, dt.Tensor(self.running_mean.value.copy())),
                          dt.Tensor(denom))
        return dt.add(dt.mul(xhat, self.gamma.tensor), self.beta.tensor)


class BatchNorm2d(Module):
    """BatchNorm over the channel axis of a single (C, H, W) image."""

    def __init__(self, name: str, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.bn = BatchNorm(name, num_features, momentum=momentum, eps=eps)

    @property
    def training(self):
        return self.bn.training

    def __call__(self, x: dt.Tensor) -> dt.Tensor:
        c, h, w = x.shape
        flat = dt.reshape(x, (c, h * w))
        rows = dt.transpose(flat, (1, 0))
        normed = self.bn(rows)
        return dt.reshape(dt.transpose(normed, (1, 0)), (c, h, w))


class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0, bias: bool = True):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            f"{name}.weight",
            glorot(rng, (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels)) if bias else None

    def __call__(self, x: dt.Tensor) -> dt.Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return dt.conv2d(x, self.weight.tensor, b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Transposed conv with kernel == stride == factor (exact tiling upsample)."""

    def __init__(self, name: str, in_channels: int, out_channels: int, factor: int,
                 rng: np.random.Generator, bias: bool = True):
        self.factor = factor
        self.weight = Parameter(
            f"{name}.weight",
            glorot(rng, (in_channels, out_channels, factor, factor),
                   in_channels * factor * factor, out_channels * factor * factor),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels)) if bias else None

    def __call__(self, x: dt.Tensor) -> dt.Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return dt.conv_transpose2d(x, self.weight.tensor, b, factor=self.factor)


def check_unique_names(params: list[Parameter], buffers: list[Buffer] | None = None) -> None:
    names = [p.name for p in params] + [b.name for b in (buffers or [])]
    seen = set()
    for n in names:
        if n in seen:
            raise ValueError(f"duplicate parameter name: {n}")
        seen.add(n)
