"""Minimal layer base: parameter discovery, dense layers and initializers."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are parameters.

    Parameters are discovered by walking attributes in definition order, so
    the naming (``"pipelines.0.layers.1.w_q"``) is stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            assign(p, value)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def assign(p: Tensor, value: np.ndarray) -> None:
    """Replace a parameter's values in place (the only sanctioned mutation)."""
    data = np.array(value, dtype=np.float64)
    data.flags.writeable = False
    p.data = data


class Dense(Module):
    """Fully-connected layer ``x @ w + b`` acting on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.w = T.parameter(glorot_uniform(rng, d_in, d_out))
        self.b = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class MLP(Module):
    """Stack of dense + activation + dropout sub-layers."""

    def __init__(self, d_in: int, hidden_dims, activation: str, p_drop: float,
                 rng: np.random.Generator):
        self.activation = activation
        self.p_drop = p_drop
        self.layers = []
        width = d_in
        for h in hidden_dims:
            self.layers.append(Dense(width, int(h), rng))
            width = int(h)
        self.d_out = width

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        act = T.get_activation(self.activation)
        for layer in self.layers:
            x = T.dropout(act(layer(x)), self.p_drop, training, rng)
        return x
