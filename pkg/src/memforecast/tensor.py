"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every forward primitive records one node on the calling thread's tape when any
of its inputs requires a gradient.  :func:`backward` replays the tape in
reverse, accumulates gradients into leaf tensors, and then consumes the tape;
replaying it a second time raises :class:`TapeError`.

Shapes must match exactly.  The only implicit broadcasting is tensor-vs-Python
scalar; everything else goes through the explicit ``expand_*`` primitives.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, TapeError

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop every recorded node (e.g. after an evaluation forward)."""
    _local.tape = Tape()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, grad_fn) -> Tensor:
    rg = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg:
        node = Node(op, inputs, out, grad_fn)
        current_tape().record(node)
        out._node = node
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data + c, (x,), "shift", lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


# Derivatives of the activations are module-level so tests can inject faults.
def sigmoid_deriv(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def tanh_deriv(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def gelu_deriv(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """d/dx of the tanh-approximate GELU; ``t`` is the cached inner tanh."""
    x2 = x * x
    if t is None:
        t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + (0.5 * GELU_C) * x * (1.0 - t * t) * (1.0 + 3 * 0.044715 * x2)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _result(y, (x,), "sigmoid", lambda g: (g * sigmoid_deriv(y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), "tanh", lambda g: (g * tanh_deriv(y),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    t = np.tanh(GELU_C * xd * (1.0 + 0.044715 * (xd * xd)))
    y = 0.5 * xd * (1.0 + t)
    return _result(y, (x,), "gelu", lambda g: (g * gelu_deriv(xd, t),))


def pointwise(op: str, *args):
    """Dispatch by name: sigmoid, tanh, gelu, add, mul, scale."""
    table = {"sigmoid": sigmoid, "tanh": tanh, "gelu": gelu, "add": add, "mul": mul, "scale": scale}
    if op not in table:
        raise ConfigurationError(f"unknown pointwise op {op!r}")
    return table[op](*args)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched 3-D product with identical batch sizes."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), "matmul", grad_fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- reductions / expansion

def sum_all(x: Tensor) -> Tensor:
    shp = x.shape
    return _result(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.full(shp, g, dtype=x.data.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shp = x.shape
    return _result(np.asarray(x.data.mean()), (x,), "mean", lambda g: (np.full(shp, g / n, dtype=x.data.dtype),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0: [m x n] -> [n]."""
    m = x.shape[0]
    shp = x.shape
    return _result(x.data.mean(axis=0), (x,), "mean_rows", lambda g: (np.broadcast_to(g / m, shp).copy(),))


def expand_rows(v: Tensor, m: int) -> Tensor:
    """Tile a vector [n] into [m x n]."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_rows expects a vector, got {v.shape}")
    return _result(np.broadcast_to(v.data, (m, v.shape[0])).copy(), (v,), "expand_rows",
                   lambda g: (g.sum(axis=0),))


def expand_last(v: Tensor, n: int) -> Tensor:
    """Repeat along a new trailing axis: [...] -> [..., n]."""
    shp = v.shape + (n,)
    return _result(np.broadcast_to(v.data[..., None], shp).copy(), (v,), "expand_last",
                   lambda g: (g.sum(axis=-1),))


def layer_stats(h: Tensor, eps: float = LN_EPS) -> tuple[Tensor, Tensor]:
    """Per-row mean and stabilized std over the last axis (population variance)."""
    if h.shape[-1] < 1:
        raise DimensionError("layer_stats needs a non-empty last axis")
    d = h.shape[-1]
    hd = h.data
    mu = hd.mean(axis=-1)
    centered = hd - mu[..., None]
    sigma = np.sqrt((centered * centered).mean(axis=-1) + eps)
    mu_t = _result(mu, (h,), "row_mean", lambda g: (np.broadcast_to(g[..., None] / d, hd.shape).copy(),))
    sigma_t = _result(sigma, (h,), "row_std", lambda g: ((g / (d * sigma))[..., None] * centered,))
    return mu_t, sigma_t


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", grad_fn)


# ---------------------------------------------------------------- structure

def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: trailing dims differ {a.shape} vs {b.shape}")
    p = a.shape[0]
    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), "concat_rows",
                   lambda g: (g[:p], g[p:]))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shp = x.shape

    def grad_fn(g):
        full = np.zeros(shp, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), "slice_rows", grad_fn)


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Circular cross-correlation along time: [L x d_in] * [w x d_in x d_out] -> [L x d_out]."""
    L, d_in = x.shape
    w, k_in, d_out = kernel.shape
    if k_in != d_in:
        raise DimensionError(f"conv1d: input features {d_in} vs kernel {kernel.shape}")
    if w > L:
        raise ConfigurationError(f"conv1d: kernel width {w} exceeds sequence length {L}")
    pad = (w - 1) // 2
    idx = (np.arange(L)[:, None] + np.arange(w)[None, :] - pad) % L
    cols = x.data[idx].reshape(L, w * d_in)
    kmat = kernel.data.reshape(w * d_in, d_out)

    def grad_fn(g):
        gk = (cols.T @ g).reshape(kernel.shape)
        gcols = (g @ kmat.T).reshape(L, w, d_in)
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, gcols)
        return gx, gk

    return _result(cols @ kmat, (x, kernel), "conv1d", grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | int | None, training: bool = True) -> Tensor:
    """Inverted Bernoulli dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


dropout_train = dropout


# ---------------------------------------------------------------- autodiff driver

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad, then consume the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("loss has no recorded history (nothing requires grad, or tape already replayed)")
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed or not tape.nodes:
        raise TapeError("loss was not recorded on the live tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    for nd in tape.nodes:
        nd.output._node = None
    tape.nodes.clear()
    tape.consumed = True


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    Non-scalar outputs are contracted with a fixed random weight so every
    output coordinate contributes.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    weight: list[np.ndarray | None] = [None]

    def scalar(out: Tensor) -> Tensor:
        if out.size == 1:
            return out if out.data.ndim == 0 else reshape(out, ())
        if weight[0] is None:
            weight[0] = np.random.default_rng(seed).standard_normal(out.shape)
        return sum_all(mul(out, Tensor(weight[0])))

    reset_tape()
    loss = scalar(f(*xs))
    if loss._node is None:
        analytic = [np.zeros_like(t.data) for t in xs]
        reset_tape()
    else:
        backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    worst = 0.0
    with no_grad():
        for t, an in zip(xs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(scalar(f(*xs)).data)
                flat[i] = orig - h
                fm = float(scalar(f(*xs)).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]))
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
