"""Input embedding: delta * conv context vector + positional + calendar encodings."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import CALENDAR_SIZES
from .errors import ConfigurationError, DimensionError, IngestionError
from .nn import Module, uniform_param
from .tensor import Tensor


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigurationError(f"d_model must be even for sinusoidal encoding, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    inv_freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * inv_freq)
    pe[:, 1::2] = np.cos(pos * inv_freq)
    return pe


class DataEmbedding(Module):
    """Maps raw feature rows and calendar marks to d_model-wide embeddings.

    The calendar tables (month, day, weekday, hour) are fixed sinusoidal
    lookups and never receive gradients; only the convolution kernel is
    trainable.
    """

    def __init__(self, d_f: int, d_model: int, rng: np.random.Generator, kernel_width: int = 3,
                 delta: float = 1.0, dtype=np.float64):
        if delta <= 0:
            raise ConfigurationError(f"delta must be positive, got {delta}")
        self.d_f = d_f
        self.d_model = d_model
        self.delta = float(delta)
        self.conv_kernel = uniform_param(rng, (kernel_width, d_f, d_model), kernel_width * d_f, dtype)
        self.seasonal_tables = [positional_encoding(n, d_model).astype(dtype) for n in CALENDAR_SIZES]
        self._pe_cache: dict[int, np.ndarray] = {}
        self.dtype = dtype

    def context_vector(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_f:
            raise DimensionError(f"expected [L x {self.d_f}] input, got {x.shape}")
        return T.conv1d(x, self.conv_kernel)

    def positional(self, length: int) -> np.ndarray:
        if length not in self._pe_cache:
            self._pe_cache[length] = positional_encoding(length, self.d_model).astype(self.dtype)
        return self._pe_cache[length]

    def seasonal(self, marks: np.ndarray) -> np.ndarray:
        marks = np.asarray(marks)
        if marks.ndim != 2 or marks.shape[1] != len(CALENDAR_SIZES):
            raise DimensionError(f"marks must be [L x 4], got {marks.shape}")
        out = np.zeros((marks.shape[0], self.d_model), dtype=self.dtype)
        for k, (table, size) in enumerate(zip(self.seasonal_tables, CALENDAR_SIZES)):
            col = marks[:, k]
            if col.size and (col.min() < 0 or col.max() >= size):
                raise IngestionError(f"calendar level {k} value out of range [0, {size})")
            out += table[col]
        return out

    def __call__(self, x: Tensor | np.ndarray, marks: np.ndarray, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if len(marks) != x.shape[0]:
            raise DimensionError(f"{x.shape[0]} rows but {len(marks)} marks")
        cv = self.context_vector(x)
        fixed = Tensor(self.positional(x.shape[0]) + self.seasonal(marks))
        out = T.add(T.scale(cv, self.delta), fixed)
        return T.dropout(out, dropout_rate, rng, training=self.training)
