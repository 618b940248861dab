"""Task-level relational memory and memory-driven conditional layer norm.

One memory matrix ``M`` (n_slots x d_rm) is kept per forecasting task.  For
every prediction window it is refreshed by attending from ``M`` over the
row-wise concatenation of ``M`` and the embedded decoder feed, passed through
a residual feedforward block, and blended with the previous matrix by sigmoid
input/forget gates.  The refreshed matrix shifts the gain and bias of the
layer norm that follows decoder self-attention.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError, PersistenceError
from .nn import Linear, Module, layer_norm, ones_param, uniform_param, zeros_param
from .tensor import Tensor

MAGIC = b"MEMTS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<5sHIIQB")


@dataclass
class MemoryState:
    M: np.ndarray
    update_count: int = 0
    frozen: bool = False
    # embedded-feed summary of the previous window, only used by gate_feed="previous"
    prev_summary: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryState):
            return NotImplemented
        return (self.M.shape == other.M.shape and self.M.tobytes() == other.M.tobytes()
                and self.update_count == other.update_count and self.frozen == other.frozen)

    @property
    def n_slots(self) -> int:
        return self.M.shape[0]

    @property
    def d_rm(self) -> int:
        return self.M.shape[1]

    def copy(self, frozen: bool | None = None) -> "MemoryState":
        prev = None if self.prev_summary is None else self.prev_summary.copy()
        return MemoryState(self.M.copy(), self.update_count, self.frozen if frozen is None else frozen, prev)


def init_memory(n_slots: int, d_rm: int) -> MemoryState:
    """One-hot identity pattern: slot s is e_s (zero rows beyond d_rm)."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    M = np.zeros((n_slots, d_rm))
    k = min(n_slots, d_rm)
    M[np.arange(k), np.arange(k)] = 1.0
    return MemoryState(M)


def persist(state: MemoryState) -> bytes:
    M = np.ascontiguousarray(state.M, dtype="<f8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, M.shape[0], M.shape[1], state.update_count, int(state.frozen))
    return header + M.tobytes()


def restore(blob: bytes, n_slots: int | None = None, d_rm: int | None = None) -> MemoryState:
    if len(blob) < _HEADER.size:
        raise PersistenceError(f"memory blob truncated: {len(blob)} bytes < header {_HEADER.size}")
    magic, version, slots, width, count, frozen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise PersistenceError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise PersistenceError(f"unsupported memory format version {version}")
    if (n_slots is not None and slots != n_slots) or (d_rm is not None and width != d_rm):
        raise PersistenceError(f"memory shape ({slots}, {width}) does not match expected ({n_slots}, {d_rm})")
    expected = _HEADER.size + 8 * slots * width
    if len(blob) != expected:
        raise PersistenceError(f"memory blob has {len(blob)} bytes, expected {expected}")
    M = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(slots, width).astype(np.float64)
    return MemoryState(M, int(count), bool(frozen))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, d = x.shape
    return T.transpose(T.reshape(x, (rows, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, rows, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (rows, heads * dh))


def summarize_feed(feed_embed: Tensor, n_slots: int) -> Tensor:
    """Mean over the feed rows, repeated once per memory slot."""
    return T.expand_rows(T.mean_rows(feed_embed), n_slots)


class MDCLN(Module):
    """Layer norm whose gain and bias are shifted by linear maps of the memory.

    Without a memory matrix it is a plain layer norm with the same gain/bias,
    so a model with the memory switched off is a vanilla Transformer.
    """

    def __init__(self, d_model: int, d_rm: int, rng: np.random.Generator | None, dtype=np.float64):
        self.gamma = ones_param((d_model,), dtype)
        self.beta = zeros_param((d_model,), dtype)
        if rng is not None:
            self.gamma_map = Linear(d_rm, d_model, rng, dtype=dtype)
            self.beta_map = Linear(d_rm, d_model, rng, dtype=dtype)
        else:
            self.gamma_map = self.beta_map = None

    def __call__(self, h: Tensor, memory: Tensor | None = None) -> Tensor:
        if memory is None:
            return layer_norm(h, self.gamma, self.beta)
        return mdcln(h, memory, self)


def mdcln(h: Tensor, memory: Tensor, params: MDCLN) -> Tensor:
    d = h.shape[-1]
    m = T.reshape(T.mean_rows(memory), (1, memory.shape[1]))
    gamma_t = T.add(params.gamma, T.reshape(params.gamma_map(m), (d,)))
    beta_t = T.add(params.beta, T.reshape(params.beta_map(m), (d,)))
    return layer_norm(h, gamma_t, beta_t)


class RelationalMemory(Module):
    def __init__(self, d_rm: int, n_slots: int, mem_heads: int, rng: np.random.Generator,
                 gate_feed: str = "current", squash_candidate: bool = True, dtype=np.float64):
        if d_rm % mem_heads:
            raise DimensionError(f"d_rm={d_rm} not divisible by mem_heads={mem_heads}")
        self.d_rm = d_rm
        self.n_slots = n_slots
        self.mem_heads = mem_heads
        self.gate_feed = gate_feed
        self.squash_candidate = squash_candidate
        self.dtype = dtype
        self.W_q = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.W_k = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.W_v = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.ffn_in = Linear(d_rm, d_rm, rng, dtype=dtype)
        self.ffn_out = Linear(d_rm, d_rm, rng, dtype=dtype)
        self.W_i = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.W_f = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.U_i = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)
        self.U_f = uniform_param(rng, (d_rm, d_rm), d_rm, dtype)

    def attention(self, memory: Tensor, feed_embed: Tensor, return_weights: bool = False):
        """Z = softmax(Q K^T / sqrt(d_head)) V with Q from M, K/V from [M; feed]."""
        if feed_embed.shape[1] != self.d_rm or memory.shape[1] != self.d_rm:
            raise DimensionError(f"memory {memory.shape} / feed {feed_embed.shape} width != d_rm={self.d_rm}")
        h = self.mem_heads
        dh = self.d_rm // h
        both = T.concat_rows(memory, feed_embed)
        q = _split_heads(T.matmul(memory, self.W_q), h)
        k = _split_heads(T.matmul(both, self.W_k), h)
        v = _split_heads(T.matmul(both, self.W_v), h)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        weights = T.softmax_rows(scores)
        z = _merge_heads(T.matmul(weights, v))
        return (z, weights) if return_weights else z

    def candidate(self, z: Tensor, memory: Tensor) -> Tensor:
        s = T.add(z, memory)
        return T.add(self.ffn_out(T.gelu(self.ffn_in(s))), s)

    def gates(self, feed_summary: Tensor, memory: Tensor) -> tuple[Tensor, Tensor]:
        tm = T.tanh(memory)
        g_i = T.add(T.matmul(feed_summary, self.W_i), T.matmul(tm, self.U_i))
        g_f = T.add(T.matmul(feed_summary, self.W_f), T.matmul(tm, self.U_f))
        return g_i, g_f

    def step(self, state: MemoryState, feed_embed: Tensor) -> tuple[Tensor, MemoryState]:
        """One refresh per prediction window; returns the updated M_t and the new state."""
        if state.M.shape != (self.n_slots, self.d_rm):
            raise DimensionError(f"memory state {state.M.shape} != ({self.n_slots}, {self.d_rm})")
        prev = Tensor(state.M.astype(self.dtype))
        if state.frozen:
            return prev, state
        summary = summarize_feed(feed_embed, self.n_slots)
        gate_in = summary
        if self.gate_feed == "previous" and state.prev_summary is not None:
            gate_in = Tensor(state.prev_summary.astype(self.dtype))
        z = self.attention(prev, feed_embed)
        m_bar = self.candidate(z, prev)
        if self.squash_candidate:
            # the unsquashed recurrence grows geometrically over long tasks
            m_bar = T.tanh(m_bar)
        g_i, g_f = self.gates(gate_in, prev)
        m_t, new_state = update_memory(state, m_bar, g_i, g_f)
        if self.gate_feed == "previous":
            new_state.prev_summary = summary.data.copy()
        return m_t, new_state


def gated_update(prev: Tensor, m_bar: Tensor, g_i: Tensor, g_f: Tensor) -> Tensor:
    """sigmoid(G_f) * M_{t-1} + sigmoid(G_i) * M_bar, elementwise."""
    return T.add(T.mul(T.sigmoid(g_f), prev), T.mul(T.sigmoid(g_i), m_bar))


def update_memory(state: MemoryState, m_bar: Tensor, g_i: Tensor, g_f: Tensor) -> tuple[Tensor, MemoryState]:
    prev = Tensor(state.M.astype(m_bar.dtype))
    if state.frozen:
        return prev, state
    m_t = gated_update(prev, m_bar, g_i, g_f)
    if not np.all(np.isfinite(m_t.data)):
        finite = np.isfinite(m_t.data)
        bad = int(finite.size - np.count_nonzero(finite))
        cand = np.abs(m_bar.data[np.isfinite(m_bar.data)])
        peak = f"{cand.max():.3g}" if cand.size else "nan"
        raise NumericError(f"memory update produced {bad} non-finite entries "
                           f"(update_count={state.update_count}, max finite |M_bar|={peak})")
    return m_t, MemoryState(m_t.data.astype(np.float64), state.update_count + 1, False, state.prev_summary)
