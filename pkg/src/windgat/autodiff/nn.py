"""Parameter containers: a minimal ``Module``, linear maps and MLPs."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Walks attributes in definition order to find parameters and sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        if n_in < 1 or n_out < 1:
            raise ShapeError(f"linear layer needs positive widths, got {n_in}->{n_out}")
        self.n_in, self.n_out = n_in, n_out
        self.W = Tensor(glorot_uniform(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.W)
        return ops.add(y, self.b) if self.b is not None else y


class MLP(Module):
    """Stack of linear layers with leaky-ReLU between them.

    ``activate_last`` controls whether the final layer is also passed
    through the nonlinearity (feature producers) or left linear
    (regression heads).
    """

    def __init__(
        self,
        n_in: int,
        widths: Sequence[int],
        rng: np.random.Generator,
        activate_last: bool = True,
    ):
        if not widths:
            raise ShapeError("MLP needs at least one layer")
        dims = [n_in, *widths]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activations = [True] * (len(widths) - 1) + [activate_last]
        self.n_in = n_in
        self.n_out = widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"MLP expects (*, {self.n_in}) input, got {x.shape}")
        for layer, act in zip(self.layers, self.activations):
            x = layer(x)
            if act:
                x = ops.leaky_relu(x, LEAKY_SLOPE)
        return x
