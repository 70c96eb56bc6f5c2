"""``kinlab`` command-line entry point.

Exit status: 0 when every requested check passes, 1 when a check fails or a
computation raises, 2 for usage and configuration errors.  Every invocation
that gets past argument parsing writes ``manifest.json`` to its output
directory, including failed ones.  Wall-clock timings go to ``timings.log``
so that the CSV and JSON files are byte-identical across repeated runs.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .. import __version__
from . import checks
from .checks import CheckResult, HierarchyCache
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, build_config
from .persistence import PersistError, dumps_json, persist
from . import suite

log = logging.getLogger("kinlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI-style config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (section.key=value; section defaults to the subcommand)")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<subcommand>)")

    parser = argparse.ArgumentParser(prog="kinlab", description="Kinetic hierarchy laboratory.")
    parser.add_argument("--version", action="version", version=f"kinlab {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads inside modules")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)

    p = sub.add_parser("diagrams", parents=[common], help="abstracts, closures, boundaries, audits")
    p.add_argument("--m0", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--enumerate", action="store_true", default=None, help="print the closure as JSON")
    p.add_argument("--audit-len", type=int)
    p.add_argument("--samples", type=int)

    sub.add_parser("landau", parents=[common], help="Landau kernel against regularised quadrature")
    sub.add_parser("resolvent", parents=[common],
                   help="Green vs direct resolvent, Airy scaling, contour identity, hat operator")
    sub.add_parser("geometry", parents=[common], help="pyramid formula and integrability scan")

    p = sub.add_parser("hierarchy", parents=[common], help="m0 = 1 hierarchy runs and studies")
    p.add_argument("--mode", choices=("run", "convergence", "ansatz", "refine"))
    p.add_argument("--N", type=float)

    p = sub.add_parser("audit", parents=[common], help="acceptance suite")
    p.add_argument("--quick", action="store_true", default=None,
                   help="combinatorial and closed-form checks only")
    p.add_argument("--only", type=lambda s: [int(x) for x in s.split(",") if x], metavar="LIST",
                   help="comma-separated criterion numbers")
    return parser


def _flag_values(args: argparse.Namespace) -> dict:
    names = {"m0": "m0", "max_len": "max_len", "enumerate": "enumerate", "audit_len": "audit_len",
             "samples": "samples", "mode": "mode", "N": "N", "quick": "quick", "only": "only"}
    return {key: getattr(args, attr) for attr, key in names.items() if getattr(args, attr, None) is not None}


# --------------------------------------------------------------- subcommands


def _diagrams(cfg: RunConfig, threads) -> list[CheckResult]:
    p = cfg.params
    out = [checks.closure_check(p)]
    if p["enumerate"]:
        sys.stdout.write(dumps_json(out[0].outputs["closure"]))
    if p["audit_len"] > 0:
        out.append(checks.audit_check(p))
    if p["samples"] > 0:
        out.append(checks.momentum_check(p))
    return out


def _landau(cfg: RunConfig, threads) -> list[CheckResult]:
    return [checks.kernel_check(cfg.params), checks.constants_table(cfg.params)]


def _resolvent(cfg: RunConfig, threads) -> list[CheckResult]:
    p = cfg.params
    return [checks.green_check(p), checks.airy_check(p), checks.contour_check(p), checks.hat_check(p)]


def _geometry(cfg: RunConfig, threads) -> list[CheckResult]:
    return [checks.pyramid_check(cfg.params), checks.scan_check(cfg.params)]


def _hierarchy(cfg: RunConfig, threads) -> list[CheckResult]:
    hc = cfg.hierarchy_config(threads)
    mode = cfg.params["mode"]
    cache = HierarchyCache()
    if mode == "run":
        return [checks.hierarchy_run_check(hc, cache)]
    if mode == "convergence":
        conv = checks.convergence_check(hc, cfg.params["N_list"], cache)
        return [conv, checks.energy_check(cache)]
    if mode == "ansatz":
        ans = checks.ansatz_check(hc, cache)
        return [ans, checks.energy_check(cache)]
    return [checks.refinement_check(hc, cfg.params["sizes"])]


def _audit(cfg: RunConfig, threads) -> list[CheckResult]:
    numbers = suite.selection(cfg.params["quick"], cfg.params["only"])

    def report(entry: suite.SuiteEntry):
        print(entry.line(), flush=True)
        _TIMINGS.append((f"criterion {entry.criterion.number}", entry.seconds))

    entries = suite.run_suite(numbers, on_entry=report)
    out = []
    for e in entries:
        r = e.result
        out.append(CheckResult(f"criterion_{e.criterion.number:02d}", r.passed,
                               dict(r.metrics, title=e.criterion.title), r.outputs))
    return out


COMMANDS = {"diagrams": _diagrams, "landau": _landau, "resolvent": _resolvent,
            "geometry": _geometry, "hierarchy": _hierarchy, "audit": _audit}
_TIMINGS: list[tuple[str, float]] = []


# --------------------------------------------------------------------- main


def _manifest(subcommand: str, echo: dict | None, status: str, results: list[CheckResult],
              error: str | None, source: str | None) -> dict:
    return {
        "artifact": "kinlab",
        "version": __version__,
        "subcommand": subcommand,
        "config": echo,
        "config_file": source,
        "status": status,
        "checks": {r.name: r.summary() for r in results},
        "verdict": status == "passed",
        "error": error,
    }


def _outputs(results: list[CheckResult]) -> dict:
    out = {}
    for r in results:
        for name, value in r.outputs.items():
            key = name if name not in out else f"{r.name}_{name}"
            out[key] = value
    return out


def _write_timings(out_dir: Path, timings: list[tuple[str, float]]) -> None:
    try:
        with open(out_dir / "timings.log", "w") as fh:
            for label, sec in timings:
                fh.write(f"{label}\t{sec:.3f}s\n")
    except OSError as exc:
        log.warning("could not write timings: %s", exc)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    name = args.subcommand
    _TIMINGS.clear()

    try:
        cfg = build_config(name, args.config, args.overrides, _flag_values(args))
        if args.out:
            cfg.out_dir = Path(args.out)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        print(f"kinlab {name}: {exc}", file=sys.stderr)
        fallback = build_config(name, None, [], {})
        if args.out:
            fallback.out_dir = Path(args.out)
        try:
            persist({}, _manifest(name, None, "config-error", [], str(exc), args.config), fallback.out_dir)
        except PersistError as perr:
            print(f"kinlab {name}: {perr}", file=sys.stderr)
        return EXIT_USAGE

    start = time.perf_counter()
    results: list[CheckResult] = []
    error = None
    try:
        results = COMMANDS[name](cfg, args.threads)
        status = "passed" if all(r.passed for r in results) else "failed"
    except Exception as exc:
        log.debug("computation failed", exc_info=True)
        error = f"{type(exc).__name__}: {exc}"
        print(f"kinlab {name}: {error}", file=sys.stderr)
        status = "error"
    _TIMINGS.append(("total", time.perf_counter() - start))

    try:
        persist(_outputs(results), _manifest(name, cfg.echo(), status, results, error, cfg.source), cfg.out_dir)
    except (PersistError, TypeError, ValueError) as exc:
        print(f"kinlab {name}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_timings(cfg.out_dir, _TIMINGS)
    for r in results:
        if name != "audit":
            print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}", file=sys.stderr)
    return EXIT_OK if status == "passed" else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
