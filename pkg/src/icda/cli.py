"""Command-line entry point: ``icda train|verify|sweep|diag``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness.config import ConfigError, ExperimentConfig, load_config, set_value
from .harness.diag import diag
from .harness.sweep import parse_grid, sweep
from .harness.training import _write_json, run
from .harness.verify import SUITES, verify


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI-style config file")
    p.add_argument("--seed", type=int, action="append",
                   help="seed to run (repeatable; replaces run.seeds)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--method", help="loss method tag (ce, la, isda, risda, icda, meta_icda)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override such as loss.lambda0=0.25 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icda", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train every configured seed"))
    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("suite", nargs="?", default="all", choices=SUITES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path)
    s = sub.add_parser("sweep", help="grid over config keys")
    _common(s)
    s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="grid axis; lambda0, beta, ratio and noise are accepted short names")
    s.add_argument("--workers", type=int, default=1)
    _common(sub.add_parser("diag", help="train one seed and emit the diagnostic bundle"))
    return ap


def _config(args, extra: list[str]) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    # remaining "--section.key value" pairs are overrides as well
    if len(extra) % 2:
        raise ConfigError(f"dangling override flag in {extra!r}")
    for flag, value in zip(extra[::2], extra[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"unexpected argument {flag!r}")
        set_value(cfg, flag[2:], value)
    if args.method:
        cfg.loss.method = args.method
    if args.seed:
        cfg.run.seeds = tuple(args.seed)
    if args.out:
        cfg.run.out = str(args.out)
    return cfg.validate()


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    try:
        if args.command == "verify":
            if extra:
                ap.error(f"unrecognized arguments: {' '.join(extra)}")
            report = verify(args.suite, args.seed)
            if args.out:
                args.out.mkdir(parents=True, exist_ok=True)
                _write_json(args.out / "metrics.json", report)
            print(json.dumps({name: r["passed"] for name, r in report["results"].items()}))
            return 0 if report["passed"] else 1
        cfg = _config(args, extra)
        if args.command == "train":
            report = run(cfg)
            print(json.dumps(report["aggregate"], indent=2))
        elif args.command == "sweep":
            rows = sweep(cfg, parse_grid(args.grid), cfg.run.out or None, args.workers)
            for r in rows:
                print(json.dumps(r))
        elif args.command == "diag":
            bundle = diag(cfg, cfg.run.seeds[0])
            if cfg.run.out:
                out = Path(cfg.run.out)
                out.mkdir(parents=True, exist_ok=True)
                _write_json(out / "diagnostics.json", bundle)
            print(json.dumps({k: bundle[k] for k in ("seed", "method", "mean_margin")}))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
