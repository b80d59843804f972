"""Train and score the seven-model suite for several seeds and print the averaged table.

    python scripts/run_benchmark.py --seeds 0 1 2 --out bench/
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from cflab.evaluation import SUITE_ORDER, write_table_csv
from cflab.pipeline import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("bench"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = ExperimentConfig()
    reports = {}
    for seed in args.seeds:
        t0 = time.perf_counter()
        res = run_experiment(cfg, seed)
        reports[seed] = res.report
        (args.out / f"report_seed{seed}.json").write_text(json.dumps(res.report.to_dict(), indent=2) + "\n")
        timings = ", ".join(f"{k} {v:.0f}s" for k, v in res.timings.items())
        print(f"seed {seed}: {time.perf_counter() - t0:.0f} s ({timings})")
    rows = []
    for name in SUITE_ORDER:
        scores = [r.models[name] for r in reports.values()]
        hits = sum(s.collision.count for s in scores)
        total = sum(s.collision.total for s in scores)
        rows.append((name, float(np.mean([s.mse for s in scores])), 1000.0 * hits / total, hits))
    write_table_csv(rows, args.out / "table.csv")
    print(f"{'model':15s} {'mse [m^2]':>10s} {'collisions':>12s}")
    for name, mse, rate, hits in rows:
        print(f"{name:15s} {mse:10.3f} {rate:9.2f}‰ ({hits})")


if __name__ == "__main__":
    main()
