"""The synthetic desk-scale fixture shared by the acceptance suite and scripts."""
from __future__ import annotations

import numpy as np

from .backbone import Forecaster
from .config import ModelConfig, TrainSchedule
from .data import Normalizer, WindowSpec, iter_windows, split, synth_generate
from .memory import init_memory
from .training import evaluate, fit

FIXTURE = dict(n_points=2000, d_f=3, encoder_len=48, decoder_len=48, pred_len=24, d_model=64, d_ff=128,
               n_heads=4, mem_heads=4, n_slots=1, enc_layers=1, dec_layers=1, batch_size=1, epochs=6,
               data_seed=0)


def fixture_data(data_seed: int = FIXTURE["data_seed"]):
    table = synth_generate(FIXTURE["n_points"], FIXTURE["d_f"], seed=data_seed)
    spec = WindowSpec(FIXTURE["encoder_len"], FIXTURE["decoder_len"], FIXTURE["pred_len"])
    train, val, test = split(table, (0.6, 0.2, 0.2), min_len=spec.window_size)
    norm = Normalizer.fit(train)
    return norm.apply(train), norm.apply(val), norm.apply(test), spec, norm


def fixture_model_config(**overrides) -> ModelConfig:
    kw = dict(d_model=FIXTURE["d_model"], d_ff=FIXTURE["d_ff"], n_heads=FIXTURE["n_heads"],
              enc_layers=FIXTURE["enc_layers"], dec_layers=FIXTURE["dec_layers"],
              encoder_len=FIXTURE["encoder_len"], decoder_len=FIXTURE["decoder_len"],
              pred_len=FIXTURE["pred_len"], d_f=FIXTURE["d_f"], n_slots=FIXTURE["n_slots"],
              mem_heads=FIXTURE["mem_heads"])
    kw.update(overrides)
    return ModelConfig(**kw)


def baseline_mse(windows) -> tuple[float, float]:
    """(persistence MSE, mean-predictor MSE) in normalized units."""
    pers = mean = 0.0
    n = 0
    for w in windows:
        last = np.repeat(w.enc_input[-1:], w.target.shape[0], axis=0)
        pers += float(np.sum((w.target - last) ** 2))
        mean += float(np.sum(w.target ** 2))
        n += w.target.size
    return pers / n, mean / n


# variant -> (use_memory, progressive dropout)
VARIANTS = {
    "memory": (True, True),
    "vanilla": (False, False),
    "memory-only": (True, False),
    "dropout-only": (False, True),
}


def run_fixture(seed: int, variant: str = "memory", epochs: int | None = None) -> dict:
    """Train one variant: "memory" is memory + progressive dropout, "vanilla" the plain Transformer
    with constant dropout, and the other two switch on one ingredient each."""
    use_memory, progressive = VARIANTS[variant]
    train, val, test, spec, _ = fixture_data()
    cfg = fixture_model_config(use_memory=use_memory)
    model = Forecaster(cfg, seed=seed)
    sched = TrainSchedule(epochs=epochs or FIXTURE["epochs"], batch_size=FIXTURE["batch_size"],
                          progressive=progressive)
    state = init_memory(cfg.n_slots, cfg.d_rm) if cfg.use_memory else None
    res = fit(model, state, train, val, sched, spec, seed=seed)
    test_w = list(iter_windows(test, spec))
    mse, mae, _ = evaluate(model, res.memory_state, test_w)
    pers, mean = baseline_mse(test_w)
    return dict(variant=variant, seed=seed, test_mse=mse, test_mae=mae, persistence_mse=pers, mean_mse=mean,
                epochs_run=len(res.history), best_epoch=res.best_epoch,
                history=[(r.train_mse, r.val_mse) for r in res.history])
