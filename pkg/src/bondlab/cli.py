"""Command line: ``bondlab <experiment> [--config FILE] [options]``.

Exit status 0 when every embedded check passes, 1 when a check fails and 2
for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, load_config
from .errors import ConfigError

log = logging.getLogger("bondlab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bondlab", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="YAML file of experiment keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--factors", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes for path loops")
    p.add_argument("--claim", help="replicate: claim name")
    p.add_argument("--figures", action="store_true", default=None, help="also write PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "paths", "steps", "factors", "out", "workers", "claim",
                                               "figures")}
    try:
        cfg = load_config(args.config, args.experiment, overrides)
    except ConfigError as exc:
        print(f"bondlab: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"bondlab: cannot read config: {exc}", file=sys.stderr)
        return 2
    from .runner import run_experiment
    try:
        manifest = run_experiment(cfg)
    except (ValueError, ArithmeticError) as exc:
        print(f"bondlab: {cfg.experiment} failed: {exc}", file=sys.stderr)
        return 1
    for name, chk in manifest.checks.items():
        status = "ok" if chk["passed"] else "FAIL"
        print(f"{status:4s} {name} {chk['value'] if chk['value'] is not None else ''}".rstrip())
    print(f"wrote {len(manifest.files)} file(s) to {cfg.out}")
    return 0 if manifest.passed else 1
