"""Command-line entry point.

    pilotctl run <config.json>        execute a scenario
    pilotctl validate <config.json>   check a config without running it

Exit codes: 0 on success, 1 on config validation failure, 2 on runtime
failure.  Failures print a machine-readable JSON object on stderr.  The
output root defaults to the current directory and can be redirected with
the PILOTCTL_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .scenarios import run, validate


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def _fail(code, kind, detail):
    json.dump({"error": kind, "detail": detail}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pilotctl",
        description="Adaptive pilot/data power control: scenario runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario config")
    p_run.add_argument("config", help="path to a JSON scenario config")
    p_run.add_argument("--output-root", default=None, help="directory for outputs")
    p_val = sub.add_parser("validate", help="validate a scenario config")
    p_val.add_argument("config", help="path to a JSON scenario config")

    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
    except ConfigError as err:
        return _fail(1, "config", str(err))

    if args.command == "validate":
        violations = validate(config)
        if violations:
            return _fail(1, "validation", violations)
        print("ok")
        return 0

    violations = validate(config)
    if violations:
        return _fail(1, "validation", violations)
    try:
        files = run(config, output_root=args.output_root)
    except ConfigError as err:
        return _fail(1, "validation", str(err))
    except Exception as err:  # solver/simulator failures: runtime exit code
        return _fail(2, "runtime", f"{type(err).__name__}: {err}")
    for path in files:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
