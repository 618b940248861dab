"""Gradient and invariant checks on toy configurations.

Every tensor primitive gets a central-difference gradient check, followed by
the composite memory step, MDCLN, a whole tiny forecaster and a handful of
structural invariants.  ``run_selfcheck`` returns one result per check;
the CLI prints them and exits nonzero if any fails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainSchedule
from .data import WindowSpec, count_windows, iter_windows, synth_generate
from .memory import MDCLN, MemoryState, RelationalMemory, gated_update, init_memory, persist, restore
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.name:<28s} {self.value:.3e} (tol {self.tol:.0e})"


def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)


# name -> (function, input shapes); inputs are standard normal unless listed in _POSITIVE
PRIMITIVES: dict[str, tuple[Callable[..., Tensor], list[tuple[int, ...]]]] = {
    "add": (T.add, [(2, 3), (2, 3)]),
    "sub": (T.sub, [(2, 3), (2, 3)]),
    "mul": (T.mul, [(2, 3), (2, 3)]),
    "div": (T.div, [(2, 3), (2, 3)]),
    "scale": (lambda x: T.scale(x, -1.7), [(2, 3)]),
    "shift": (lambda x: T.shift(x, 0.4), [(2, 3)]),
    "neg": (T.neg, [(2, 3)]),
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "matmul_batched": (T.matmul, [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 2)]),
    "reshape": (lambda x: T.reshape(x, (3, 2)), [(2, 3)]),
    "sigmoid": (T.sigmoid, [(3, 3)]),
    "tanh": (T.tanh, [(3, 3)]),
    "gelu": (T.gelu, [(3, 3)]),
    "softmax_rows": (T.softmax_rows, [(3, 4)]),
    "layer_mean": (lambda x: T.layer_stats(x)[0], [(3, 5)]),
    "layer_std": (lambda x: T.layer_stats(x)[1], [(3, 5)]),
    "sum_all": (T.sum_all, [(2, 3)]),
    "mean_all": (T.mean_all, [(2, 3)]),
    "mean_rows": (T.mean_rows, [(4, 3)]),
    "expand_rows": (lambda v: T.expand_rows(v, 3), [(4,)]),
    "expand_last": (lambda v: T.expand_last(v, 3), [(4,)]),
    "concat_rows": (T.concat_rows, [(2, 3), (1, 3)]),
    "slice_rows": (lambda x: T.slice_rows(x, 1, 3), [(4, 2)]),
    "conv1d": (T.conv1d, [(5, 2), (3, 2, 3)]),
    "dropout": (lambda x: T.dropout(x, 0.3, 5), [(3, 4)]),
}
_POSITIVE = {("div", 1)}


def primitive_inputs(name: str, seed: int = 0) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    _, shapes = PRIMITIVES[name]
    return [_positive(rng, *s) if (name, k) in _POSITIVE else Tensor(rng.standard_normal(s), requires_grad=True)
            for k, s in enumerate(shapes)]


def check_primitives(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (fn, _) in PRIMITIVES.items():
        err = T.grad_check(fn, primitive_inputs(name, seed))
        out.append(CheckResult(f"grad {name}", err, PRIMITIVE_TOL, err < PRIMITIVE_TOL))
    return out


def toy_model_config(**kw) -> ModelConfig:
    base = dict(d_model=4, d_ff=4, n_heads=1, mem_heads=1, encoder_len=4, decoder_len=2, pred_len=2, d_f=2)
    base.update(kw)
    return ModelConfig(**base)


def check_composites(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mem = RelationalMemory(8, 2, 2, rng)
    state = MemoryState(rng.standard_normal((2, 8)) * 0.5)
    feed = Tensor(rng.standard_normal((3, 8)))
    names = ["W_q", "W_k", "W_v", "W_i", "W_f", "U_i", "U_f"]

    def step(x, *ps):
        for n, p in zip(names, ps):
            setattr(mem, n, p)
        return mem.step(state, x)[0]

    e_mem = T.grad_check(step, [feed] + [getattr(mem, n) for n in names], h=1e-6)

    norm = MDCLN(4, 4, rng)
    h = Tensor(rng.standard_normal((3, 4)))
    m = Tensor(rng.standard_normal((2, 4)))

    def cln(hh, mm, gw, bw):
        norm.gamma_map.weight, norm.beta_map.weight = gw, bw
        return norm(hh, mm)

    e_cln = T.grad_check(cln, [h, m, norm.gamma_map.weight, norm.beta_map.weight], h=1e-6)

    from .backbone import Forecaster  # local import keeps the primitive checks importable on their own

    cfg = toy_model_config()
    model = Forecaster(cfg, seed=seed).eval()
    w = next(iter(iter_windows(synth_generate(20, 2, seed=seed), WindowSpec(4, 2, 2))))
    s0 = init_memory(cfg.n_slots, cfg.d_rm)
    named = dict(model.named_parameters())
    picks = ["head.weight", "decoder.0.norm1.gamma_map.weight", "memory.U_f", "encoder.0.ffn.lin1.weight"]

    def whole(*ps):
        for name, p in zip(picks, ps):
            obj = model
            *path, leaf = name.split(".")
            for part in path:
                obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
            setattr(obj, leaf, p)
        return model.forward(w, s0).predictions[0]

    e_model = T.grad_check(whole, [named[k] for k in picks], h=1e-6)
    return [CheckResult("grad memory step", e_mem, COMPOSITE_TOL, e_mem < COMPOSITE_TOL),
            CheckResult("grad mdcln", e_cln, COMPOSITE_TOL, e_cln < COMPOSITE_TOL),
            CheckResult("grad forecaster", e_model, COMPOSITE_TOL, e_model < COMPOSITE_TOL)]


def check_invariants(seed: int = 0) -> list[CheckResult]:
    from .backbone import Forecaster
    from .training import dropout_rate

    rng = np.random.default_rng(seed)
    out = []

    worst = 0.0
    for _ in range(20):
        prev, m_bar, g_i, g_f = (rng.standard_normal((2, 8)) for _ in range(4))
        got = gated_update(Tensor(prev), Tensor(m_bar), Tensor(g_i), Tensor(g_f)).data
        ref = np.empty_like(prev)
        for i in range(2):
            for j in range(8):
                ref[i, j] = (prev[i, j] / (1 + math.exp(-g_f[i, j])) + m_bar[i, j] / (1 + math.exp(-g_i[i, j])))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    out.append(CheckResult("gated update oracle", worst, 1e-12, worst < 1e-12))

    cfg = toy_model_config(d_model=8, n_heads=2, mem_heads=2, encoder_len=6, decoder_len=4, pred_len=3)
    w = list(iter_windows(synth_generate(30, 2, seed=seed), WindowSpec(6, 4, 3)))[2]
    mismatches = 0
    for k in range(5):
        mem_model = Forecaster(cfg, seed=seed + k)
        mem_model.zero_memory_maps()
        van = Forecaster(toy_model_config(d_model=8, n_heads=2, mem_heads=2, encoder_len=6, decoder_len=4,
                                          pred_len=3, use_memory=False), seed=seed + k)
        a, _ = mem_model.predict(w, MemoryState(np.zeros((1, 8)), frozen=True))
        b, _ = van.predict(w)
        mismatches += a.tobytes() != b.tobytes()
    out.append(CheckResult("degeneracy bit-identity", float(mismatches), 0.0, mismatches == 0))

    sched = TrainSchedule()
    traj = [dropout_rate(t, sched) for t in range(1001)]
    mono = all(b >= a for a, b in zip(traj, traj[1:])) and traj[0] == 0.0 and traj[-1] >= 0.099
    out.append(CheckResult("dropout schedule shape", 0.0 if mono else 1.0, 0.0, mono))

    bad = 0
    for _ in range(50):
        n, ls, lp, s = (int(v) for v in rng.integers(1, [80, 20, 10, 5], endpoint=True))
        spec = WindowSpec(ls, max(1, ls // 2), lp, s)
        brute = sum(1 for start in range(0, n, s) if start + spec.window_size <= n)
        bad += count_windows(n, spec) != brute
    out.append(CheckResult("window count enumeration", float(bad), 0.0, bad == 0))

    st = MemoryState(rng.standard_normal((2, 8)), 5, False)
    ok = restore(persist(st)) == st
    out.append(CheckResult("memory round trip", 0.0 if ok else 1.0, 0.0, ok))
    return out


def run_selfcheck(seed: int = 0) -> list[CheckResult]:
    return check_primitives(seed) + check_composites(seed) + check_invariants(seed)
