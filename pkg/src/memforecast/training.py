"""Progressive (curriculum-dropout) training, Adam, early stopping and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbone import Forecaster
from .config import TrainSchedule
from .data import SeriesTable, WindowSample, WindowSpec, iter_windows
from .errors import DimensionError, NumericError
from .memory import MemoryState
from .tensor import Tensor

log = logging.getLogger(__name__)


def dropout_rate(t: int, schedule: TrainSchedule) -> float:
    """min(theta_max, (1 - theta_max) * (1 - exp(-gamma * t))) at tick t."""
    th = schedule.theta_max
    return min(th, 1.0 - th - (1.0 - th) * math.exp(-schedule.gamma_decay * t))


def learning_rate(epoch: int, schedule: TrainSchedule) -> float:
    start = schedule.lr_halving_start_epoch
    if epoch < start:
        return schedule.lr0
    return schedule.lr0 * 0.5 ** (epoch - start + 1)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * factor
    return total


def optimizer_step(named_params: Sequence[tuple[str, Tensor]], state: OptimizerState, lr: float) -> None:
    """Adam with bias correction; gradients are cleared afterwards."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= (lr / c1) * m / denom
        p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    dropout_rate: float


@dataclass
class FitResult:
    model: Forecaster
    memory_state: MemoryState | None
    history: list[EpochRecord]
    dropout_trajectory: list[float]
    best_epoch: int
    iterations: int
    optimizer: OptimizerState


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse", "lr", "dropout_rate"])
    for r in history:
        w.writerow([r.epoch, f"{r.train_mse:.17g}", f"{r.val_mse:.17g}", f"{r.lr:.17g}", f"{r.dropout_rate:.17g}"])
    return buf.getvalue()


def _target(window: WindowSample, model: Forecaster, target_only: bool) -> np.ndarray:
    y = window.target
    cfg = model.cfg
    if cfg.univariate or target_only:
        y = y[:, [cfg.target_index]]
    return y.astype(model.dtype)


def _prediction_for_loss(pred: Tensor, model: Forecaster, target_only: bool) -> Tensor:
    if target_only and not model.cfg.univariate:
        idx = model.cfg.target_index % model.cfg.d_f
        sel = np.zeros((model.cfg.d_f, 1), dtype=model.dtype)
        sel[idx, 0] = 1.0
        return T.matmul(pred, Tensor(sel))
    return pred


def evaluate(model: Forecaster, state: MemoryState | None, table: SeriesTable | Sequence[WindowSample],
             spec: WindowSpec | None = None, target_only: bool = False,
             per_window: bool = False):
    """Average MSE and MAE over all windows in chronological order.

    The memory keeps updating window by window unless ``state.frozen``.
    Returns ``(mse, mae, final_state)`` plus the per-window pairs when
    ``per_window`` is set.
    """
    windows = list(iter_windows(table, spec)) if isinstance(table, SeriesTable) else list(table)
    sq = ab = 0.0
    n = 0
    pairs = []
    for w in windows:
        pred, state = model.predict(w, state)
        if target_only and not model.cfg.univariate:
            pred = pred[:, [model.cfg.target_index]]
        y = _target(w, model, target_only).astype(np.float64)
        err = pred - y
        wsq = float(np.sum(err * err))
        wab = float(np.sum(np.abs(err)))
        sq += wsq
        ab += wab
        n += err.size
        if per_window:
            pairs.append((wsq / err.size, wab / err.size))
    mse = sq / max(n, 1)
    mae = ab / max(n, 1)
    if per_window:
        return mse, mae, state, pairs
    return mse, mae, state


def fit(model: Forecaster, memory_state: MemoryState | None, train: SeriesTable | Sequence[WindowSample],
        val: SeriesTable | Sequence[WindowSample], schedule: TrainSchedule, spec: WindowSpec | None = None,
        seed: int = 0, max_iterations: int | None = None) -> FitResult:
    """Train with curriculum dropout and early stopping on validation MSE.

    Tables must already be normalized.  Training windows are reshuffled every
    epoch (seeded) unless ``schedule.shuffle`` is off; the memory is refreshed
    once per optimizer step in whatever order the windows arrive.  Validation
    runs on a frozen copy of the memory, and the best-validation parameters
    and memory are restored at the end.
    """
    train_w = list(iter_windows(train, spec)) if isinstance(train, SeriesTable) else list(train)
    val_w = list(iter_windows(val, spec)) if isinstance(val, SeriesTable) else list(val)
    rng = np.random.default_rng([seed, 7])
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = OptimizerState()
    trajectory: list[float] = []
    history: list[EpochRecord] = []
    best_val = math.inf
    best = (model.state_dict(), None if memory_state is None else memory_state.copy(), -1)
    bad_epochs = 0
    it = 0
    state = memory_state
    bs = schedule.batch_size
    model.train()
    for epoch in range(schedule.epochs):
        lr = learning_rate(epoch, schedule)
        total, count = 0.0, 0
        rate = 0.0
        order = rng.permutation(len(train_w)) if schedule.shuffle else np.arange(len(train_w))
        for b0 in range(0, len(train_w), bs):
            if max_iterations is not None and it >= max_iterations:
                break
            batch = [train_w[k] for k in order[b0:b0 + bs]]
            tick = it // schedule.cadence
            rate = dropout_rate(tick, schedule) if schedule.progressive else model.cfg.base_dropout
            if it % schedule.cadence == 0:
                trajectory.append(rate)
            T.reset_tape()
            res = model.forward(batch, state, rate, rng)
            losses = [mse_loss(_prediction_for_loss(p, model, schedule.target_only),
                               Tensor(_target(w, model, schedule.target_only)))
                      for p, w in zip(res.predictions, batch)]
            loss = losses[0]
            for extra in losses[1:]:
                loss = T.add(loss, extra)
            if len(losses) > 1:
                loss = T.scale(loss, 1.0 / len(losses))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at iteration {it} (epoch {epoch}, lr={lr:g}, "
                                   f"dropout={rate:g})")
            T.backward(loss)
            clip_grad_norm(params, schedule.grad_clip)
            optimizer_step(named, opt, lr)
            state = res.state
            total += value * len(batch)
            count += len(batch)
            it += 1
        val_state = None if state is None else state.copy(frozen=True)
        val_mse, _, _ = evaluate(model, val_state, val_w, target_only=schedule.target_only)
        model.train()
        train_mse = total / max(count, 1)
        history.append(EpochRecord(epoch, train_mse, val_mse, lr, rate))
        log.info("epoch %d train_mse=%.5f val_mse=%.5f lr=%.2e dropout=%.4f", epoch, train_mse, val_mse, lr, rate)
        if val_mse < best_val:
            best_val = val_mse
            best = (model.state_dict(), None if state is None else state.copy(), epoch)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= schedule.patience:
                break
        if max_iterations is not None and it >= max_iterations:
            break
    params_best, state_best, best_epoch = best
    model.load_state_dict(params_best)
    model.eval()
    return FitResult(model, state_best, history, trajectory, best_epoch, it, opt)
