"""``movo-sim``: run scenarios and check their metrics.

Exit codes: 0 pass, 1 metric failure, 2 invariant breach or unusable input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import SCENARIOS, ScenarioConfig
from .harness import MalformedReport, builtin_expectations, load_report, simulate, verify

EXIT_OK = 0
EXIT_METRIC_FAILURE = 1
EXIT_INVARIANT_BREACH = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="movo-sim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and emit its metrics report")
    run.add_argument("scenario", choices=SCENARIOS)
    run.add_argument("--config", type=Path, help="scenario config JSON")
    run.add_argument("--duration-s", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, help="report path; the event log goes next to it")
    run.add_argument("--expect", help="expectations file or built-in scenario name to check right away")

    ver = sub.add_parser("verify", help="check a report against expectations")
    ver.add_argument("--report", type=Path, required=True)
    ver.add_argument("--expect", required=True, help="expectations JSON file, or a scenario name for the built-in set")
    return p


def _load_expectations(source: str):
    path = Path(source)
    if path.exists():
        return json.loads(path.read_text())
    if source in SCENARIOS:
        return builtin_expectations(source)
    raise FileNotFoundError(f"no expectations file {source!r}")


def _report_checks(report: dict, expect: str) -> int:
    checks = verify(report, _load_expectations(expect))
    for c in checks:
        print(c.line())
    breaches = report.get("invariant_breaches") or []
    for b in breaches:
        print(f"BREACH {b}")
    if breaches:
        return EXIT_INVARIANT_BREACH
    return EXIT_METRIC_FAILURE if any(not c.passed for c in checks) else EXIT_OK


def _cmd_run(args) -> int:
    overrides = {"scenario": args.scenario, "duration_s": args.duration_s, "seed": args.seed}
    if args.out is not None:
        overrides["output"] = str(args.out)
    if args.config is not None:
        config = ScenarioConfig.load(args.config, **overrides)
    else:
        config = ScenarioConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    run = simulate(config)
    if config.output:
        log = run.write(config.output)
        print(f"report: {config.output}\nevents: {log}", file=sys.stderr)
    else:
        sys.stdout.write(run.report.to_json())
    if args.expect:
        return _report_checks(run.report.to_dict(), args.expect)
    for b in run.report.invariant_breaches:
        print(f"BREACH {b}", file=sys.stderr)
    return EXIT_INVARIANT_BREACH if run.report.invariant_breaches else EXIT_OK


def _cmd_verify(args) -> int:
    report = load_report(args.report)
    return _report_checks(report, args.expect)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_verify(args)
    except (MalformedReport, FileNotFoundError, ValueError) as exc:
        print(f"movo-sim: error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT_BREACH


if __name__ == "__main__":
    sys.exit(main())
