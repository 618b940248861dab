"""Encoder-decoder Transformer with one-shot (generative-style) decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import WindowSample
from .embedding import DataEmbedding
from .errors import ConfigurationError, DimensionError
from .memory import MDCLN, MemoryState, RelationalMemory
from .nn import LayerNorm, Linear, Module, uniform_param
from .tensor import Tensor

MASK_VALUE = -1e9


def _dtype(cfg: ModelConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


class AttentionBlock(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        if d_model % n_heads:
            raise ConfigurationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.W_Q = uniform_param(rng, (d_model, d_model), d_model, dtype)
        self.W_K = uniform_param(rng, (d_model, d_model), d_model, dtype)
        self.W_V = uniform_param(rng, (d_model, d_model), d_model, dtype)
        self.W_O = uniform_param(rng, (d_model, d_model), d_model, dtype)


_mask_cache: dict[tuple[int, int, int, str], Tensor] = {}


def causal_mask(heads: int, rows: int, dtype=np.float64) -> Tensor:
    key = (heads, rows, rows, np.dtype(dtype).str)
    if key not in _mask_cache:
        upper = np.triu(np.ones((rows, rows), dtype=bool), k=1)
        mask = np.where(upper, MASK_VALUE, 0.0).astype(dtype)
        _mask_cache[key] = Tensor(np.broadcast_to(mask, (heads, rows, rows)).copy())
    return _mask_cache[key]


def multi_head_attention(q_in: Tensor, kv_in: Tensor, block: AttentionBlock, dropout_rate: float = 0.0,
                         rng: np.random.Generator | None = None, training: bool = False,
                         causal: bool = False, return_weights: bool = False):
    d = block.W_Q.shape[0]
    if q_in.shape[1] != d or kv_in.shape[1] != d:
        raise DimensionError(f"attention inputs {q_in.shape}, {kv_in.shape} do not match d_model={d}")
    h = block.n_heads
    dh = d // h
    lq, lk = q_in.shape[0], kv_in.shape[0]
    q = T.transpose(T.reshape(T.matmul(q_in, block.W_Q), (lq, h, dh)), (1, 0, 2))
    k = T.transpose(T.reshape(T.matmul(kv_in, block.W_K), (lk, h, dh)), (1, 2, 0))
    v = T.transpose(T.reshape(T.matmul(kv_in, block.W_V), (lk, h, dh)), (1, 0, 2))
    scores = T.scale(T.matmul(q, k), 1.0 / np.sqrt(dh))
    if causal:
        if lq != lk:
            raise DimensionError("causal attention needs equal query/key lengths")
        scores = T.add(scores, causal_mask(h, lq, scores.dtype))
    weights = T.softmax_rows(scores)
    dropped = T.dropout(weights, dropout_rate, rng, training=training)
    ctx = T.reshape(T.transpose(T.matmul(dropped, v), (1, 0, 2)), (lq, d))
    out = T.matmul(ctx, block.W_O)
    return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float64):
        self.lin1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.lin2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor, dropout_rate: float, rng, training: bool) -> Tensor:
        hidden = T.dropout(T.gelu(self.lin1(x)), dropout_rate, rng, training=training)
        return self.lin2(hidden)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.attn = AttentionBlock(cfg.d_model, cfg.n_heads, rng, dtype)
        self.norm1 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)
        self.norm2 = LayerNorm(cfg.d_model, dtype)

    def __call__(self, x: Tensor, rate: float, rng) -> Tensor:
        tr = self.training
        a = multi_head_attention(x, x, self.attn, rate, rng, tr)
        x = self.norm1(T.add(x, T.dropout(a, rate, rng, training=tr)))
        y = self.ffn(x, rate, rng, tr)
        return self.norm2(T.add(x, T.dropout(y, rate, rng, training=tr)))


class DecoderLayer(Module):
    """Masked self-attention -> MDCLN(., M_t) -> cross-attention -> FFN, post-norm residuals."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.self_attn = AttentionBlock(cfg.d_model, cfg.n_heads, rng, dtype)
        self.cross_attn = AttentionBlock(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)
        self.norm2 = LayerNorm(cfg.d_model, dtype)
        self.norm3 = LayerNorm(cfg.d_model, dtype)
        self.norm1 = MDCLN(cfg.d_model, cfg.d_rm, None, dtype)

    def attach_memory_maps(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> None:
        self.norm1.gamma_map = Linear(cfg.d_rm, cfg.d_model, rng, dtype=dtype)
        self.norm1.beta_map = Linear(cfg.d_rm, cfg.d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor, enc_out: Tensor, memory: Tensor | None, rate: float, rng) -> Tensor:
        tr = self.training
        a = multi_head_attention(x, x, self.self_attn, rate, rng, tr, causal=True)
        x = self.norm1(T.add(x, T.dropout(a, rate, rng, training=tr)), memory)
        c = multi_head_attention(x, enc_out, self.cross_attn, rate, rng, tr)
        x = self.norm2(T.add(x, T.dropout(c, rate, rng, training=tr)))
        y = self.ffn(x, rate, rng, tr)
        return self.norm3(T.add(x, T.dropout(y, rate, rng, training=tr)))


def build_decoder_feed(window: WindowSample) -> tuple[np.ndarray, np.ndarray]:
    """Decoder history rows followed by an all-zero placeholder for the horizon."""
    lp = window.target.shape[0]
    values = np.concatenate([window.dec_input, np.zeros((lp, window.dec_input.shape[1]))], axis=0)
    return values, window.dec_marks


@dataclass
class ForwardResult:
    predictions: list[Tensor]
    state: MemoryState | None
    memory: Tensor | None


class Forecaster(Module):
    """Embeddings + encoder + decoder (+ optional task-level memory) + output head.

    Backbone parameters are drawn from ``seed``; memory-specific parameters
    from a separate stream, so a vanilla and a memory model built with the same
    seed share identical backbone weights.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        dtype = _dtype(cfg)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.enc_embedding = DataEmbedding(cfg.d_f, cfg.d_model, rng, cfg.kernel_width, cfg.delta, dtype)
        self.dec_embedding = DataEmbedding(cfg.d_f, cfg.d_model, rng, cfg.kernel_width, cfg.delta, dtype)
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.dec_layers)]
        self.head = Linear(cfg.d_model, cfg.output_dim, rng, dtype=dtype)
        self.memory = None
        if cfg.use_memory:
            mem_rng = np.random.default_rng([seed, 1])
            self.memory = RelationalMemory(cfg.d_rm, cfg.n_slots, cfg.mem_heads, mem_rng, cfg.gate_feed,
                                           cfg.squash_candidate, dtype)
            for layer in self.decoder:
                layer.attach_memory_maps(cfg, mem_rng, dtype)

    def zero_memory_maps(self) -> None:
        for layer in self.decoder:
            if layer.norm1.gamma_map is not None:
                layer.norm1.gamma_map.zero_()
                layer.norm1.beta_map.zero_()

    def encoder_forward(self, x: Tensor, rate: float = 0.0, rng=None) -> Tensor:
        for layer in self.encoder:
            x = layer(x, rate, rng)
        return x

    def decoder_forward(self, feed: Tensor, enc_out: Tensor, memory: Tensor | None,
                        rate: float = 0.0, rng=None) -> Tensor:
        if memory is not None and memory.shape[1] != self.cfg.d_model:
            raise ConfigurationError(f"memory width {memory.shape[1]} != d_model {self.cfg.d_model}")
        for layer in self.decoder:
            feed = layer(feed, enc_out, memory, rate, rng)
        return feed

    def project_output(self, dec_out: Tensor) -> Tensor:
        n = dec_out.shape[0]
        return self.head(T.slice_rows(dec_out, n - self.cfg.pred_len, n))

    def forward(self, windows: WindowSample | Sequence[WindowSample], state: MemoryState | None = None,
                rate: float = 0.0, rng: np.random.Generator | None = None) -> ForwardResult:
        """Predict every window in one pass each.

        All windows in the call share a single memory refresh driven by the
        mean of their embedded decoder feeds.  ``state=None`` (or a model built
        without memory) runs the plain Transformer path.
        """
        if isinstance(windows, WindowSample):
            windows = [windows]
        cfg = self.cfg
        enc_outs, feeds = [], []
        for w in windows:
            if w.enc_input.shape[1] != cfg.d_f:
                raise ConfigurationError(f"window has {w.enc_input.shape[1]} features, model expects {cfg.d_f}")
            x = self.enc_embedding(Tensor(w.enc_input.astype(self.dtype)), w.enc_marks, rate, rng)
            enc_outs.append(self.encoder_forward(x, rate, rng))
            vals, marks = build_decoder_feed(w)
            feeds.append(self.dec_embedding(Tensor(vals.astype(self.dtype)), marks, rate, rng))

        use_mem = self.memory is not None and state is not None
        mem_t = None
        new_state = state
        if use_mem:
            feed_mean = feeds[0]
            for f in feeds[1:]:
                feed_mean = T.add(feed_mean, f)
            if len(feeds) > 1:
                feed_mean = T.scale(feed_mean, 1.0 / len(feeds))
            if cfg.update_order == "update_first":
                mem_t, new_state = self.memory.step(state, feed_mean)
            else:
                mem_t = Tensor(state.M.astype(self.dtype))
        preds = []
        for enc_out, feed in zip(enc_outs, feeds):
            dec = self.decoder_forward(feed, enc_out, mem_t, rate, rng)
            preds.append(self.project_output(dec))
        if use_mem and cfg.update_order == "decode_first":
            with T.no_grad():
                _, new_state = self.memory.step(state, feed_mean.detach())
        return ForwardResult(preds, new_state, mem_t)

    def predict(self, window: WindowSample, state: MemoryState | None = None) -> tuple[np.ndarray, MemoryState | None]:
        """Eval-mode forecast of one window without recording a tape."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                res = self.forward(window, state)
        finally:
            self.train(was)
        return res.predictions[0].data.astype(np.float64), res.state
