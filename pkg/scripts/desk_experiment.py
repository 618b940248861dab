"""Desk-scale comparison on the synthetic fixture.

Trains the memory model with progressive dropout and a plain Transformer
(constant dropout) over several seeds and reports test MSE against the
persistence and mean baselines.

    python scripts/desk_experiment.py --seeds 0 1 2 3 4
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import time

from memforecast.experiment import FIXTURE, VARIANTS, run_fixture


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=["memory", "vanilla"], choices=sorted(VARIANTS))
    ap.add_argument("--epochs", type=int, default=FIXTURE["epochs"])
    ap.add_argument("--json", help="write per-run results here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    rows = []
    for variant in args.variants:
        for seed in args.seeds:
            t0 = time.perf_counter()
            res = run_fixture(seed, variant, epochs=args.epochs)
            res["seconds"] = time.perf_counter() - t0
            rows.append(res)
            print(f"{variant:8s} seed={seed} test_mse={res['test_mse']:.4f} mae={res['test_mae']:.4f} "
                  f"persist={res['persistence_mse']:.4f} mean={res['mean_mse']:.4f} "
                  f"epochs={res['epochs_run']} {res['seconds']:.0f}s", flush=True)
    for variant in args.variants:
        mses = [r["test_mse"] for r in rows if r["variant"] == variant]
        print(f"{variant:8s} median test MSE {statistics.median(mses):.4f}")
    if len(args.variants) == 2:
        a = statistics.median(r["test_mse"] for r in rows if r["variant"] == args.variants[0])
        b = statistics.median(r["test_mse"] for r in rows if r["variant"] == args.variants[1])
        print(f"relative change {args.variants[0]} vs {args.variants[1]}: {(a - b) / b:+.1%}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
