"""Command-line entry point.

Exit codes:
    0  success
    1  gradcheck tolerance exceeded
    2  invalid config or arguments
    3  training diverged
    4  snapshot archive missing or unreadable
    5  runs have incompatible snapshot grids

Data goes to stdout, diagnostics to stderr.  ``BORA_LOG_LEVEL`` sets the log
verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .adapters import Method
from .archive import ArchiveError, write_csv, write_json_atomic
from .errors import AlignmentError, DegenerateNormError, TrainingDiverged
from .experiment import (
    compare_runs,
    export_metrics,
    gradcheck_report,
    load_arch,
    params_table,
    run_experiment,
)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3
EXIT_NO_ARCHIVE = 4
EXIT_GRID = 5

GRADCHECK_TOL = 1e-4

log = logging.getLogger("bora")


def _err(msg: str) -> None:
    print(f"bora: {msg}", file=sys.stderr)


def _validation_message(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<config>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_train(args) -> int:
    try:
        out = run_experiment(args.config, args.out)
    except FileNotFoundError as exc:
        _err(f"config not found: {exc.filename}")
        return EXIT_INVALID
    except ValidationError as exc:
        _err(_validation_message(exc))
        return EXIT_INVALID
    except TrainingDiverged as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    print(json.dumps({"run_dir": str(out), "run_id": json.loads((out / "run.json").read_text())["run_id"]}))
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        text = export_metrics(args.run, args.mode, args.dim, strict=not args.lenient)
    except (ArchiveError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_NO_ARCHIVE
    except DegenerateNormError as exc:
        _err(f"{exc} (rerun with --lenient to skip such vectors)")
        return EXIT_INVALID
    if args.csv == "-":
        sys.stdout.write(text)
    else:
        write_csv(args.csv, text)
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        arch = load_arch(args.arch)
        methods = [Method(m).value for m in _csv_list(args.method)]
        ranks = [int(r) for r in _csv_list(args.rank)]
        targets = _csv_list(args.targets) if args.targets else None
        rows = params_table(arch, methods, ranks, targets)
    except FileNotFoundError as exc:
        _err(f"arch not found: {exc.filename}")
        return EXIT_INVALID
    except (ValueError, KeyError, ValidationError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    if args.format == "json":
        print(json.dumps({"arch": arch.name, "rows": rows}, indent=2))
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=["method", "rank", "count", "percent"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "percent": f"{row['percent']:.2f}"})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        h_r, h_c = (int(x) for x in args.dims.lower().split("x"))
        report = gradcheck_report(args.method, h_r, h_c, args.rank, seed=args.seed, step=args.step)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_INVALID
    worst = max(report["max_rel_error"].values())
    report["tolerance"] = GRADCHECK_TOL
    report["passed"] = worst < GRADCHECK_TOL
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK


def cmd_compare(args) -> int:
    try:
        report = compare_runs(args.runs, strict=not args.lenient)
    except (ArchiveError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_NO_ARCHIVE
    except AlignmentError as exc:
        _err(str(exc))
        return EXIT_GRID
    except (ValueError, DegenerateNormError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_json_atomic(args.report, report)
    print(json.dumps({r["run_dir"]: r["symmetry_ratio"] for r in report["runs"]}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bora", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one adapted model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="export magnitude/direction metrics as CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=["consecutive", "total"], default="consecutive")
    p.add_argument("--dim", choices=["row", "col", "both"], default="both")
    p.add_argument("--csv", required=True, help="output path, or - for stdout")
    p.add_argument("--lenient", action="store_true", help="skip zero vectors instead of failing")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("params", help="trainable-parameter table")
    p.add_argument("--arch", required=True, help="ArchSpec JSON path or builtin name")
    p.add_argument("--method", required=True, help="comma list of lora,dora,dora_row,bora")
    p.add_argument("--rank", required=True, help="comma list of ranks")
    p.add_argument("--targets", default="", help="comma list of matrix labels (default: all)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of one random layer")
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--dims", required=True, help="RxC, e.g. 8x6")
    p.add_argument("--rank", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="compare dynamics of several runs")
    p.add_argument("--runs", required=True, nargs="+")
    p.add_argument("--report", required=True)
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BORA_LOG_LEVEL", "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
