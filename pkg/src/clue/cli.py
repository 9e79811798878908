"""Command-line entry point: ``clue <command> --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

from . import config as config_mod
from .errors import ConfigurationError
from .pipeline import COMMANDS, HANDLERS, write_run_manifest
from .seeding import set_deterministic

log = logging.getLogger("clue")

OUT_ENV = "CLUE_OUT"
DEFAULT_OUT = "clue-out"


def resolve_out(out: str | None) -> Path:
    return Path(out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run(command: str, config_path=None, seed: int | None = None, out=None,
        deterministic: bool = False) -> int:
    """Run one pipeline command (or ``all``); return a process exit status."""
    if command != "all" and command not in HANDLERS:
        print(f"unknown command {command!r}; choose from {', '.join(COMMANDS)} or all", file=sys.stderr)
        return 2
    try:
        cfg = config_mod.load(config_path) if config_path else config_mod.parse({})
        if seed is not None:
            cfg.master_seed = seed
    except ConfigurationError as exc:
        print(f"config error at {exc.field}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    if deterministic or cfg.deterministic:
        set_deterministic(True)

    root = resolve_out(out)
    for cmd in (COMMANDS if command == "all" else (command,)):
        status = _run_one(cmd, cfg, root)
        if status:
            return status
    return 0


def _run_one(cmd: str, cfg, root: Path) -> int:
    target = root / cmd
    if target.exists():
        shutil.rmtree(target)
    target.mkdir(parents=True)
    log.info("running %s -> %s", cmd, target)
    try:
        HANDLERS[cmd](cfg, root, target)
        write_run_manifest(target, cmd, cfg)
    except Exception as exc:  # quarantine whatever the command managed to write
        failed = root / "failed" / cmd
        if failed.exists():
            shutil.rmtree(failed)
        failed.parent.mkdir(parents=True, exist_ok=True)
        shutil.move(str(target), str(failed))
        field = f" at {exc.field}" if isinstance(exc, ConfigurationError) else ""
        print(f"{cmd} failed{field}: {exc}; partial outputs moved to {failed}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clue", description=__doc__)
    p.add_argument("command", choices=[*COMMANDS, "all"])
    p.add_argument("--config", metavar="PATH", help="YAML run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", metavar="DIR", help=f"output root (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible execution")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.seed, args.out, args.deterministic)


if __name__ == "__main__":
    sys.exit(main())
