"""Parameter containers and the handful of layers the model is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters; child modules and lists of modules are walked recursively."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val._modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item._modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float64) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple[int, ...], dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape: tuple[int, ...], dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = uniform_param(rng, (d_in, d_out), d_in, dtype)
        self.bias = uniform_param(rng, (d_out,), d_in, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is None:
            return y
        return T.add(y, T.expand_rows(self.bias, x.shape[0]))

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


def layer_norm(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * (h - mu) / sigma + beta per row, gamma/beta given as vectors."""
    rows, d = h.shape
    mu, sigma = T.layer_stats(h)
    normed = T.div(T.sub(h, T.expand_last(mu, d)), T.expand_last(sigma, d))
    return T.add(T.mul(T.expand_rows(gamma, rows), normed), T.expand_rows(beta, rows))


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gamma = ones_param((d,), dtype)
        self.beta = zeros_param((d,), dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return layer_norm(h, self.gamma, self.beta)
