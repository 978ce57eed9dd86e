"""Parameter containers and the layers shared by backbone and decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, get_default_dtype


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Module:
    """Tree of named parameters.

    Attributes holding a parameter :class:`Tensor`, a :class:`Module`, or a list
    of modules are discovered automatically, in attribute definition order.
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
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns names that were not found."""
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        if strict and missing:
            raise KeyError(f"missing parameters: {missing}")
        return missing

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int = 0):
        fan_in = c_in * k * k
        self.weight = parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, layers: int = 2):
        dims = [d_in] + [d_hidden] * (layers - 1) + [d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.gelu(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, heads, d // heads))
    return ops.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    x = ops.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return ops.reshape(x, (*lead, n, h * dh))


class Attention(Module):
    """Multi-head attention; queries and keys/values may come from different sets.

    ``allowed`` (broadcastable to ``... x N_q x M``) restricts which memory
    positions each query may attend to. The last call's weights are kept in
    ``last_weights`` (``... x heads x N_q x M``) for inspection.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_kv: int | None = None):
        if d % heads:
            raise DimensionError(f"embedding dim {d} not divisible by heads {heads}")
        d_kv = d_kv or d
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d_kv, d, rng)
        self.v = Linear(d_kv, d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, key: Tensor, value: Tensor | None = None, allowed: np.ndarray | None = None) -> Tensor:
        value = key if value is None else value
        q = split_heads(self.q(query), self.heads)
        k = split_heads(self.k(key), self.heads)
        v = split_heads(self.v(value), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        logits = ops.matmul(q, ops.swapaxes(k, -1, -2)) * scale
        if allowed is None:
            weights = ops.softmax(logits, axis=-1)
        else:
            allowed = np.asarray(allowed, dtype=bool)
            weights = ops.masked_softmax(logits, np.expand_dims(allowed, -3), axis=-1)
        self.last_weights = weights.data
        return self.out(merge_heads(ops.matmul(weights, v)))
