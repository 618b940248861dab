"""memforecast command line: train, eval, forecast, selfcheck, synth.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (including a failed selfcheck).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, write_memory
from .config import RunConfig, dump_config, load_config
from .data import Normalizer, SeriesTable, WindowSpec, iter_windows, load_csv, split, synth_generate, write_csv
from .errors import ConfigurationError, DimensionError, IngestionError, NumericError, PersistenceError

log = logging.getLogger("memforecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_table(cfg: RunConfig, override: str | None = None) -> SeriesTable:
    d = cfg.data
    path = override or d.path
    if path:
        return load_csv(path, d.datetime_column, d.target_column or None)
    return synth_generate(d.synth_points, d.synth_features, seed=d.synth_seed, noise=d.synth_noise)


def window_spec(cfg: RunConfig) -> WindowSpec:
    m = cfg.model
    return WindowSpec(m.encoder_len, m.decoder_len, m.pred_len, cfg.data.stride)


def _test_split(ckpt: Checkpoint, data: str | None) -> tuple[SeriesTable, SeriesTable]:
    """Raw and normalized test segment of the dataset a checkpoint was trained for."""
    cfg = ckpt.config
    table = load_table(cfg, data)
    if table.n_features != cfg.model.d_f:
        raise ConfigurationError(f"dataset has {table.n_features} features, checkpoint expects {cfg.model.d_f}")
    spec = window_spec(cfg)
    _, _, test = split(table, cfg.data.split, min_len=spec.window_size)
    norm = ckpt.normalizer or Normalizer.fit(split(table, cfg.data.split)[0])
    return test, norm.apply(test)


# ---------------------------------------------------------------- verbs

def cmd_train(args) -> int:
    from .backbone import Forecaster
    from .memory import init_memory
    from .training import fit, history_csv

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    table = load_table(cfg)
    cfg.model.d_f = table.n_features
    cfg.model.target_index = table.target_index
    cfg.model.validate()
    spec = window_spec(cfg)
    train, val, _ = split(table, cfg.data.split, min_len=spec.window_size)
    norm = Normalizer.fit(train)
    model = Forecaster(cfg.model, seed=cfg.seed)
    state = init_memory(cfg.model.n_slots, cfg.model.d_rm) if cfg.model.use_memory else None
    res = fit(model, state, norm.apply(train), norm.apply(val), cfg.schedule, spec, seed=cfg.seed)

    out = Path(cfg.out)
    ckpt = Checkpoint(cfg, model.state_dict(), res.memory_state, norm, res.optimizer, res.iterations,
                      res.iterations // cfg.schedule.cadence)
    save_checkpoint(out / "checkpoint", ckpt)
    atomic_write(out / "history.csv", history_csv(res.history))
    atomic_write(out / "resolved.cfg", dump_config(cfg))
    best = res.history[res.best_epoch]
    print(f"trained {len(res.history)} epochs, best epoch {best.epoch} val_mse={best.val_mse:.6f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    _, test = _test_split(ckpt, args.data)
    state = ckpt.memory
    if state is not None and args.freeze_memory:
        state = state.copy(frozen=True)
    spec = window_spec(ckpt.config)
    mse, mae, state = evaluate(model, state, test, spec)
    metrics = dict(mse=mse, mae=mae, windows=sum(1 for _ in iter_windows(test, spec)),
                   frozen_memory=bool(args.freeze_memory),
                   memory_update_count=None if state is None else state.update_count)
    if state is not None and not args.freeze_memory:
        # the task memory keeps evolving past training, so carry it forward
        write_memory(args.checkpoint, state)
    out = Path(args.out or Path(args.checkpoint).parent) / "metrics.json"
    atomic_write(out, json.dumps(metrics, indent=1) + "\n")
    print(f"mse={mse:.6f} mae={mae:.6f} -> {out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    raw, test = _test_split(ckpt, args.data)
    spec = window_spec(ckpt.config)
    windows = list(iter_windows(test, spec))
    if not 0 <= args.index < len(windows):
        raise UsageError(f"window index {args.index} out of range [0, {len(windows)})")
    w = windows[args.index]
    state = ckpt.memory
    if state is not None and args.freeze_memory:
        state = state.copy(frozen=True)
    pred, _ = model.predict(w, state)
    norm = ckpt.normalizer
    cfg = ckpt.config.model
    ti = cfg.target_index % cfg.d_f
    # denormalize the whole feature matrix, or just the target column for a univariate head
    if pred.shape[1] == cfg.d_f:
        pred_raw = norm.denormalize(pred)
        pred_target = pred_raw[:, ti]
    else:
        pred_raw = None
        pred_target = pred[:, 0] * norm.stds[ti] + norm.means[ti]
    true_raw = norm.denormalize(w.target)
    last_raw = norm.denormalize(w.enc_input[-1:])[0]
    horizon = w.timestamps

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["timestamp", "true", "predicted", "persistence"])
    for k, ts in enumerate(horizon):
        wr.writerow([ts.isoformat(sep=" "), f"{true_raw[k, ti]:.17g}", f"{pred_target[k]:.17g}",
                     f"{last_raw[ti]:.17g}"])
    out = Path(args.out or Path(args.checkpoint).parent)
    atomic_write(out / "forecast.csv", buf.getvalue())

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["timestamp", "feature", "true", "predicted"])
    names = raw.feature_names
    for k, ts in enumerate(horizon):
        for j, name in enumerate(names):
            p = pred_raw[k, j] if pred_raw is not None else (pred_target[k] if j == ti else float("nan"))
            wr.writerow([ts.isoformat(sep=" "), name, f"{true_raw[k, j]:.17g}", f"{p:.17g}"])
    atomic_write(out / "plot_data.csv", buf.getvalue())
    print(f"forecast of {len(horizon)} steps -> {out / 'forecast.csv'}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args) -> int:
    table = synth_generate(args.n, args.features, seed=args.seed or 0, noise=args.noise)
    out = Path(args.out or "synth.csv")
    if out.suffix.lower() != ".csv":
        out = out / "synth.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(table, out)
    print(f"wrote {len(table)} rows x {table.n_features} features -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="memforecast", description="Transformer forecasting with a task-level relational memory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("--config", help="key = value run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "MSE/MAE on the test split"),
                            ("forecast", cmd_forecast, "write one test-window forecast")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="CSV to use instead of the one recorded in the checkpoint")
        p.add_argument("--freeze-memory", action="store_true")
        p.add_argument("--out")
        if name == "forecast":
            p.add_argument("--index", type=int, default=0, help="test window index")
        p.set_defaults(func=func)

    p = sub.add_parser("selfcheck", help="gradient and invariant checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--features", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, PersistenceError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
