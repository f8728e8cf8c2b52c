"""Run a synthetic replication grid and print the aggregated metrics.

    python scripts/run_experiment.py power_grid --reps 50 --out power_grid.csv
    python scripts/run_experiment.py dirichlet_multinomial --reps 10 --n 1000
"""

import argparse
import csv
import time

from quasibart import experiments
from quasibart.synth import SCENARIOS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help="defaults to QUASIBART_WORKERS or 1")
    p.add_argument("--out", help="per-replication metrics CSV")
    args = p.parse_args()

    scale = experiments.BenchScale(N=args.n, P=args.p, phi=args.phi, trees=args.trees, iterations=args.iters,
                                   burn_in=args.burnin, seed=args.seed)
    start = time.perf_counter()
    cols, rows = experiments.run_bench(args.scenario, args.reps, scale, workers=args.workers)
    elapsed = time.perf_counter() - start
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in rows:
                wr.writerow([experiments.format_value(r[c]) for c in cols])
    print(f"{args.scenario}: {args.reps} replications in {elapsed:.1f}s")
    for key, value in experiments.summarize_rows(args.scenario, rows).items():
        print(f"  {key}: {value}")


if __name__ == "__main__":
    main()
