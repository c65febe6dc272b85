"""Sweep the LPT tradeoffs (lambda, gamma) and the IL proximal weight on one
seed, printing each sweep.csv as a table.

    python3 scripts/sweep_tradeoffs.py --out runs/tradeoffs --seed 1
"""
import argparse
import csv
from pathlib import Path

from skillearn.config import RunConfig
from skillearn.runner import sweep

VALUES = (0.1, 0.5, 1.0, 2.0, 5.0)
PLAN = (("lpt", "lambda", VALUES), ("lpt", "gamma", VALUES), ("il", "lambda", (1.0, 10.0, 100.0)))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--iterations", type=int, default=0, help="0 = mode defaults")
    args = ap.parse_args()
    for mode, param, values in PLAN:
        out = Path(args.out) / f"{mode}_{param}"
        cfg = RunConfig(mode=mode, seed=args.seed, iterations=args.iterations, out=str(out))
        _, status = sweep(cfg, param, values)
        print(f"{mode} {param} (status {status})")
        with open(out / "sweep.csv") as fh:
            for row in csv.reader(fh):
                print("  " + "  ".join(f"{c[:10]:>10s}" for c in row))


if __name__ == "__main__":
    main()
