"""Command-line interface.

Subcommands: pretrain, downstream, external, report, explain, audit. Every
subcommand accepts the common flags --config/--seed/--out/--force/--parallel/
--deterministic (flags irrelevant to a subcommand are accepted and ignored,
so grid scripts can pass one flag set everywhere). Exit codes: 0 success,
2 configuration error, 3 data error, 4 run failure.

Grid configs expand into independent cells; --parallel N runs up to N cells
as separate processes. The ledger serializes concurrent appends, but a cell
whose DeLong reference is another cell of the same grid must run after it.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

from . import experiment
from .config import load_experiment_configs, load_yaml_mapping
from .errors import ConfigError, DataError, FundusFMError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUN = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_RUN


def _add_common_flags(parser: argparse.ArgumentParser,
                      config_required: bool) -> None:
    parser.add_argument("--config", required=config_required, metavar="PATH",
                        help="experiment config file (YAML)")
    parser.add_argument("--seed", type=int, default=None, metavar="INT",
                        help="override the config seed")
    parser.add_argument("--out", default=None, metavar="DIR",
                        help="output root (beats config and environment)")
    parser.add_argument("--force", action="store_true",
                        help="re-run cells already completed for this config")
    parser.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="run up to N grid cells as separate processes")
    parser.add_argument("--deterministic", action="store_true",
                        help="bit-reproducible training (slower kernels)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundusfm",
        description="Fundus foundation-model experiments: two-stage "
                    "pretraining, LP/FT evaluation, reporting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config, summary in (
            ("pretrain", True, "train upstream weights (general / fundus / "
                               "general_fundus)"),
            ("downstream", True, "cross-validated downstream train/eval of a "
                                 "config grid"),
            ("external", True, "evaluation-only validation on a foreign "
                               "dataset"),
            ("report", False, "tables and plots over completed runs"),
            ("explain", True, "saliency maps and embedding projection for a "
                              "run"),
            ("audit", False, "cross-check ledger against on-disk artifacts")):
        _add_common_flags(sub.add_parser(name, help=summary),
                          config_required=needs_config)
    return parser


def _load_cells(args) -> list:
    cells = load_experiment_configs(args.config)
    if args.seed is not None:
        cells = [dataclasses.replace(c, seed=args.seed) for c in cells]
    return cells


def _pretrain_worker(payload):
    cfg, out, force, deterministic = payload
    return experiment.run_pretrain(cfg, out=out, force=force,
                                   deterministic=deterministic)


def _downstream_worker(payload):
    cfg, out, force, deterministic = payload
    return experiment.run_downstream(cfg, out=out, force=force,
                                     deterministic=deterministic)


def _run_cells(cells, worker, args) -> list:
    """Run cells sequentially or in a process pool; collect result-or-error
    per cell in submission order."""
    payloads = [(cfg, args.out, args.force, args.deterministic)
                for cfg in cells]
    if args.parallel <= 1 or len(payloads) == 1:
        results = []
        for payload in payloads:
            try:
                results.append(worker(payload))
            except Exception as exc:  # keep later cells running
                results.append(exc)
        return results
    with ProcessPoolExecutor(max_workers=args.parallel) as pool:
        futures = [pool.submit(worker, payload) for payload in payloads]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except Exception as exc:
                results.append(exc)
        return results


def _report_outcomes(cells, results, describe) -> int:
    code = EXIT_OK
    for cfg, result in zip(cells, results):
        if isinstance(result, Exception):
            print(f"{describe(cfg)}: FAILED: {result}", file=sys.stderr)
            if code == EXIT_OK:
                code = exit_code_for(result)
        else:
            artifact, skipped = result
            note = "skipped (already complete)" if skipped else "completed"
            print(f"{describe(cfg)}: {note}: {artifact}")
    return code


def _cmd_pretrain(args) -> int:
    cells = _load_cells(args)
    results = _run_cells(cells, _pretrain_worker, args)
    return _report_outcomes(
        cells, results,
        lambda c: f"pretrain {c.regime} r{c.resolution} w{c.base_width}")


def _cmd_downstream(args) -> int:
    cells = _load_cells(args)
    results = _run_cells(cells, _downstream_worker, args)
    return _report_outcomes(
        cells, results,
        lambda c: (f"downstream {c.task_kind} {c.regime} {c.protocol} "
                   f"r{c.resolution} f{c.fraction:g}"))


def _cmd_external(args) -> int:
    mapping = load_yaml_mapping(args.config)
    report_path, skipped = experiment.run_external(mapping, out=args.out,
                                                   force=args.force)
    note = "skipped (already complete)" if skipped else "completed"
    print(f"external {mapping.get('dataset_name')}: {note}: {report_path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    where = None
    report_dir = None
    if args.config:
        mapping = load_yaml_mapping(args.config)
        where = mapping.get("where")
        report_dir = mapping.get("report_dir")
    written = experiment.run_report(out=args.out, where=where,
                                    report_dir=report_dir)
    for path in written:
        print(f"report: {path}")
    return EXIT_OK


def _cmd_explain(args) -> int:
    mapping = load_yaml_mapping(args.config)
    written = experiment.run_explain(mapping, out=args.out,
                                     seed=args.seed or 0)
    for path in written:
        print(f"explain: {path}")
    return EXIT_OK


def _cmd_audit(args) -> int:
    violations = experiment.run_audit(out=args.out)
    if violations:
        for violation in violations:
            print(f"audit: {violation}", file=sys.stderr)
        print(f"audit: {len(violations)} violation(s)", file=sys.stderr)
        return EXIT_RUN
    print("audit: clean")
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "downstream": _cmd_downstream,
    "external": _cmd_external,
    "report": _cmd_report,
    "explain": _cmd_explain,
    "audit": _cmd_audit,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FundusFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except Exception as exc:
        traceback.print_exc()
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
