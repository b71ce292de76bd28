"""Parameter containers and the small layers the experts are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class Module:
    """Base class that discovers parameters and buffers from attributes.

    Attribute insertion order fixes parameter order, so names are stable
    across save/load.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                yield name + ".running_mean", value.running_mean
                yield name + ".running_var", value.running_var
            elif isinstance(value, Tensor) and not value.requires_grad:
                yield name, value.data
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def batch_norm_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for key, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield key, value
            elif isinstance(value, Module):
                for sub, state in value.batch_norm_states():
                    yield f"{key}.{sub}", state
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, state in item.batch_norm_states():
                            yield f"{key}.{i}.{sub}", state

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = T.parameter(kaiming_uniform(rng, (n_in, n_out), n_in) / np.sqrt(2.0))
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


# The block is invariant to the kernel's scale (batch norm follows), so a
# small initial norm raises the effective step size of plain SGD.
BLOCK_INIT_SCALE = 0.1


class ConvBlock(Module):
    """conv2d 3x3 -> batch_norm -> relu."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.kernel = T.parameter(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9) * BLOCK_INIT_SCALE)
        self.scale = T.parameter(np.ones(c_out))
        self.shift = T.parameter(np.zeros(c_out))
        self.bn = BatchNormState(c_out)

    def __call__(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        y = T.conv2d(x, self.kernel)
        y = T.batch_norm(y, self.scale, self.shift, self.bn, training=training, update_stats=update_stats)
        return T.relu(y)

    @staticmethod
    def count(c_in: int, c_out: int) -> int:
        return c_out * c_in * 9 + 2 * c_out
