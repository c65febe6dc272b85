"""Command line: run, sweep, gradcheck, gen-data, init-config."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from .config import HELP, RunConfig, load_config
from .data import generate_data
from .errors import ConfigError, SkillearnError
from .gradcheck import TOLERANCES, gradcheck
from .runner import EXIT_CONFIG, EXIT_OK, EXIT_TOLERANCE, exit_code, run_experiment, sweep

_SPECIAL = ("seed", "out")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        if f.name in _SPECIAL:
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V",
                       help=HELP[f.name])


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="search then evaluate one configuration")
    _add_config_flags(p)
    p.add_argument("--seed", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="one run per value of lambda or gamma")
    _add_config_flags(p)
    p.add_argument("--param", required=True, choices=("lambda", "gamma"))
    p.add_argument("--values", required=True, help="comma separated, e.g. 0.1,0.5,1,2,5")
    p.add_argument("--seed")
    p.add_argument("--out", required=True, help="output directory (sweep.csv plus one directory per value)")

    p = sub.add_parser("gradcheck", help="compare hypergradients with finite differences")
    _add_config_flags(p)
    p.add_argument("--seed")
    p.add_argument("--corrupt", action="append", default=[], choices=sorted(TOLERANCES),
                   help="flip the sign of one analytic gradient (self-test)")

    p = sub.add_parser("gen-data", help="write the synthetic dataset bundle as .npz")
    _add_config_flags(p)
    p.add_argument("--seed")
    p.add_argument("--out", required=True, help="output .npz file")

    p = sub.add_parser("init-config", help="print or write the default configuration")
    p.add_argument("--out", help="file to write (default: stdout)")
    return parser


def _err(exc) -> None:
    rec = {"code": getattr(exc, "code", type(exc).__name__), "message": str(exc)}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init-config":
        text = RunConfig().to_text()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    over = _overrides(args)
    if args.command in ("gen-data", "sweep", "gradcheck"):
        over["out"] = None
    try:
        cfg = load_config(args.config, over)
    except (ConfigError, ValueError) as exc:
        _err(exc)
        return EXIT_CONFIG

    if args.command == "run":
        if cfg.mode == "gradcheck":
            return _gradcheck(cfg, [])
        res = run_experiment(cfg)
        if res.status != EXIT_OK:
            print(json.dumps(res.error, sort_keys=True), file=sys.stderr)
        else:
            print(f"test_acc={res.summary['test_acc']:.4f} arch={' '.join(res.summary['arch'])} out={res.out}")
        return res.status

    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
            rows, worst = sweep(replace(cfg, out=args.out), args.param, values)
        except (ConfigError, ValueError) as exc:
            _err(exc)
            return EXIT_CONFIG
        for r in rows:
            print(f"{args.param}={r['value']:g} test_acc={r['test_acc']:.4f} status={r['status']}")
        print(f"wrote {Path(args.out) / 'sweep.csv'}")
        return worst

    if args.command == "gradcheck":
        return _gradcheck(cfg, args.corrupt)

    # gen-data
    try:
        bundle = generate_data(cfg.data_spec(), cfg.seed)
    except SkillearnError as exc:
        _err(exc)
        return exit_code(exc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(bundle.to_npz())
    print(f"wrote {out}")
    return EXIT_OK


def _gradcheck(cfg, corrupt) -> int:
    try:
        checks = gradcheck(cfg, corrupt)
    except (SkillearnError, ValueError) as exc:
        _err(exc)
        return exit_code(exc)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.ok for c in checks) else EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
