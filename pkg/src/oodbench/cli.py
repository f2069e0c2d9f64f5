"""Command-line entry point: ``oodbench run|compare|export``.

Exit codes: 0 when every configured run completed, 1 when a run diverged
or a command could not produce its output, 2 for usage/config errors.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .experiment import ExperimentExists, load_report, run_experiment
from .report import EXPORT_KINDS, MissingPlotData, export_plotdata, write_comparison

log = logging.getLogger("oodbench")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oodbench", description="Desk-scale OOD detection workbench.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and score everything a config describes")
    run.add_argument("config", help="JSON experiment config")
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--force", action="store_true", help="overwrite an existing report in the output directory")
    run.add_argument("--threads", type=int, default=1, help="parallel (run, seed) jobs")

    cmp_ = sub.add_parser("compare", help="method comparison table (CSV + text) from a report")
    cmp_.add_argument("report", help="report.json or the directory holding it")

    exp = sub.add_parser("export", help="write plot-data CSVs (and PNG figures) for one figure kind")
    exp.add_argument("report", help="report.json or the directory holding it")
    exp.add_argument("--kind", required=True, choices=EXPORT_KINDS + ("all",))
    exp.add_argument("--no-render", action="store_true", help="write CSVs only")
    return ap


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        from .config import with_output_dir

        cfg = with_output_dir(cfg, args.output_dir)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    report = run_experiment(cfg, force=args.force, threads=args.threads)
    failed = [f"{r['run_id']}/seed{r['seed']}" for r in report["runs"] if r["status"] != "ok"]
    print(f"wrote {report['dir']}/report.json ({len(report['runs'])} runs)")
    if failed:
        print(f"incomplete runs: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _compare(args) -> int:
    report = load_report(args.report)
    csv_path, txt_path = write_comparison(report)
    print(txt_path.read_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return 0 if report.get("complete") else 1


def _export(args) -> int:
    report = load_report(args.report)
    kinds = EXPORT_KINDS if args.kind == "all" else (args.kind,)
    status = 0
    for kind in kinds:
        try:
            for p in export_plotdata(report, kind, render=not args.no_render):
                print(f"wrote {p}")
        except MissingPlotData as exc:
            print(f"{kind}: {exc}", file=sys.stderr)
            status = 1
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    handler = {"run": _run, "compare": _compare, "export": _export}[args.command]
    try:
        return handler(args)
    except (ConfigError, ExperimentExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
