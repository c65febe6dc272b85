"""Search-then-evaluate comparison over seeds: LPT vs the one-level baseline
and interleaving vs joint learning, on an overlapping-blobs task and on two
moons. Prints mean +- std of the derived architectures' test accuracy and
writes the per-seed numbers as JSON.

    python3 scripts/compare_direction.py --seeds 1-10 --out runs/direction
"""
import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from skillearn.config import RunConfig
from skillearn.runner import EXIT_OK, run_seeds

TASKS = {
    "blobs": dict(task="blobs", separation=2.0, noise=1.0),
    "moons": dict(task="moons", noise=0.3),
}
PAIRS = (("lpt", "baseline"), ("il", "jl"))


def parse_seeds(text):
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def compare(seeds, out=None, iterations=0, tasks=tuple(TASKS)):
    report = {}
    for name in tasks:
        for mode_a, mode_b in PAIRS:
            row = {}
            for mode in (mode_a, mode_b):
                cfg = RunConfig(mode=mode, iterations=iterations, **TASKS[name])
                if out:
                    cfg = replace(cfg, out=str(Path(out) / name / mode))
                results, stats = run_seeds(cfg, seeds, write=bool(out))
                failed = [r.error for r in results if r.status != EXIT_OK]
                row[mode] = {"acc": [r.summary.get("test_acc") for r in results], **stats,
                             "failed": failed}
            row["margin"] = row[mode_a]["mean"] - row[mode_b]["mean"]
            report[f"{name}:{mode_a}-vs-{mode_b}"] = row
    return report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="1-10")
    ap.add_argument("--iterations", type=int, default=0, help="0 = mode defaults")
    ap.add_argument("--out", default="")
    args = ap.parse_args()
    t0 = time.time()
    report = compare(parse_seeds(args.seeds), args.out, args.iterations)
    for key, row in report.items():
        a, b = key.split(":")[1].split("-vs-")
        print(f"{key:28s} {a}={row[a]['mean']:.4f}+-{row[a]['std']:.4f} "
              f"{b}={row[b]['mean']:.4f}+-{row[b]['std']:.4f} margin={row['margin']:+.4f}")
    print(f"total {time.time() - t0:.0f}s")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "direction.json").write_text(json.dumps(report, indent=1, default=float))


if __name__ == "__main__":
    main()
