"""Command-line front door.

    zdecay [options] run --all | --stage NAME [--stage NAME ...]
    zdecay [options] assemble | cascade | mourre | decay
    zdecay report [DIR]
    zdecay selftest

Every config key has a flag (``--section-key VALUE``, TOML syntax for
values); ``--set section.key=VALUE`` is the generic form.  The output
directory is ``--out``, else $ZDECAY_OUT, else ``out_dir`` from the config.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or missing input,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from .config import DEFAULTS, ExperimentConfig, parse_value
from .errors import (ConsistencyError, CoverageError, InvalidArgument, MissingArtifact, NumericFailure,
                     ResolutionError, ResourceLimit)
from .workbench import STAGES, StageError, report, run

EXIT_PASS, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
ENV_OUT = "ZDECAY_OUT"
USAGE_ERRORS = (InvalidArgument, MissingArtifact, ResolutionError, ResourceLimit)
NUMERIC_ERRORS = (NumericFailure, ConsistencyError, CoverageError)
STRUCTURAL_CHECKS = (1, 2, 3, 4, 9, 14)


def _leaves(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaves(v, prefix + k + ".")
        else:
            yield prefix + k


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="TOML config file (defaults are embedded)")
    g.add_argument("--out", type=Path, help=f"output directory (default ${ENV_OUT} or out_dir)")
    g.add_argument("--g", type=float, help="coupling of the assembled Hamiltonian (cascade.g_main)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g.add_argument("--no-determinism", action="store_true", help="skip the re-run determinism check")
    keys = p.add_argument_group("config keys")
    for key in _leaves(DEFAULTS):
        if key == "out_dir":
            continue
        keys.add_argument(_flag(key), dest="key:" + key, metavar="VALUE", help=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    opts = _options()
    parser = argparse.ArgumentParser(prog="zdecay", description="Desk-scale lab for the Z0 -> nu nubar model.",
                                     epilog="Config keys map to flags: " + ", ".join(
                                         _flag(k) for k in _leaves(DEFAULTS) if k != "out_dir"))
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[opts], help="run stages")
    sel = r.add_mutually_exclusive_group(required=True)
    sel.add_argument("--all", action="store_true", help="run every stage")
    sel.add_argument("--stage", action="append", choices=STAGES + ("dynamics",), help="stage to run (repeatable)")
    for name in STAGES:
        sub.add_parser(name, parents=[opts], help=f"run the {name} stage")
    rep = sub.add_parser("report", help="summarize an artifact directory")
    rep.add_argument("dir", nargs="?", type=Path)
    sub.add_parser("selftest", parents=[opts], help="end-to-end run on the dimension-8 toy instance")
    return parser


def make_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for key, val in sorted(vars(args).items()):
        if key.startswith("key:") and val is not None:
            cfg.set(key[4:], parse_value(val))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), parse_value(v.strip()))
    if getattr(args, "g", None) is not None:
        cfg.set("cascade.g_main", float(args.g))
    return cfg


def out_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None) is not None:
        return args.out
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(cfg.data["out_dir"])


def _log(msg: str) -> None:
    print(msg, flush=True)


def selftest(args) -> int:
    cfg = ExperimentConfig.toy()
    with tempfile.TemporaryDirectory() as tmp:
        _, out = run(cfg, out=getattr(args, "out", None) or tmp, determinism=True, log=_log)
        _, checks = report(out)
    ids = [c.id for c in checks]
    complete = ids == list(range(1, 15))
    structural = all(c.status == "PASS" for c in checks if c.id in STRUCTURAL_CHECKS)
    print(f"selftest: acceptance table {'complete' if complete else 'incomplete'} ({len(ids)} rows), "
          f"structural checks {'pass' if structural else 'fail'}")
    return EXIT_PASS if complete and structural else EXIT_CHECK


def dispatch(args) -> int:
    if args.command == "report":
        d = args.dir or Path(os.environ.get(ENV_OUT) or DEFAULTS["out_dir"])
        text, checks = report(d)
        print(text)
        return EXIT_CHECK if any(c.status == "FAIL" for c in checks) else EXIT_PASS
    if args.command == "selftest":
        return selftest(args)
    cfg = make_config(args)
    if args.command == "run":
        stages = STAGES if args.all else args.stage
    else:
        stages = [args.command]
    status, out = run(cfg, stages, out_dir(args, cfg), determinism=False if args.no_determinism else None,
                      log=_log)
    print(f"artifacts: {out}")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return dispatch(args)
    except StageError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, USAGE_ERRORS):
            return EXIT_USAGE
        if isinstance(cause, NUMERIC_ERRORS):
            return EXIT_NUMERIC
        raise
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
