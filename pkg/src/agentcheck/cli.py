"""Command-line entry point: run one test, run a suite, render reports, write fixtures."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .llm import PricingTable
from .metrics import RunSummary, parse_annotations, render_report, suite_metrics
from .spec_model import canonical_json
from .suite import (
    EXIT_FRAMEWORK_ERROR, EXIT_PASS, EXIT_USAGE, ConfigError, SuiteConfig, find_run_dirs, run_feature, run_suite,
    write_suite,
)


def _load_config(args: argparse.Namespace) -> SuiteConfig:
    cfg = SuiteConfig.load(args.config, environ=os.environ)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "max_retries", None) is not None:
        over["max_retries"] = args.max_retries
    if getattr(args, "out", None):
        over["out"] = Path(args.out)
    if getattr(args, "transcript", None):
        over["transcript"] = Path(args.transcript)
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    return replace(cfg, **over)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    try:
        cfg.feature(args.feature)
    except KeyError:
        print(f"error: unknown feature id {args.feature!r}", file=sys.stderr)
        return EXIT_USAGE
    res = run_feature(cfg, args.feature)
    if res.error:
        print(f"{args.feature}: framework error: {res.error}", file=sys.stderr)
    else:
        v = res.record.verdict
        print(f"{args.feature}: {v.outcome.value} ({len(v.bugs)} bug(s)) -> {res.directory}")
    return res.exit_code


def _report(dirs: Sequence[Path], annotations: Sequence[dict], pricing: Optional[PricingTable]):
    runs = [RunSummary.load(d) for d in dirs]
    return suite_metrics(runs, annotations, pricing)


def cmd_suite(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if not cfg.features:
        print("error: the features file lists no features", file=sys.stderr)
        return EXIT_USAGE
    results = run_suite(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = [{"feature": r.feature_id, "exit_code": r.exit_code, "error": r.error,
                "directory": r.directory.name} for r in results]
    (out / "suite.json").write_text(canonical_json(summary))
    metrics = _report([r.directory for r in results if r.error is None], [], cfg.pricing)
    text = render_report(metrics)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(canonical_json(metrics.to_dict()))
    print(text, end="")
    errors = [r for r in results if r.error]
    for r in errors:
        print(f"{r.feature_id}: framework error: {r.error}", file=sys.stderr)
    return EXIT_FRAMEWORK_ERROR if errors else EXIT_PASS


def cmd_report(args: argparse.Namespace) -> int:
    annotations: list[dict] = []
    for a in args.annotations or ():
        p = Path(a)
        if not p.exists():
            print(f"error: annotation file not found: {p}", file=sys.stderr)
            return EXIT_USAGE
        annotations += parse_annotations(p.read_text().splitlines())
    pricing = PricingTable.from_file(args.pricing) if args.pricing else None
    metrics = _report(find_run_dirs(args.runs), annotations, pricing)
    print(render_report(metrics), end="")
    if args.json:
        Path(args.json).write_text(canonical_json(metrics.to_dict()))
    return EXIT_PASS


def cmd_fixtures(args: argparse.Namespace) -> int:
    from .scenarios import fault_scenarios, fixture_suite, golden_scenarios

    sets = {
        "golden": lambda: list(golden_scenarios().values()),
        "faults": fault_scenarios,
        "suite99": lambda: fixture_suite(99),
    }
    fx = write_suite(args.directory, sets[args.set]())
    print(f"wrote {len(fx.feature_ids)} features; config: {fx.config_path}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentcheck", description="Specification-driven testing of LLM agents.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", required=True, help="suite config JSON")
        sp.add_argument("--out", help="output directory for run records")
        sp.add_argument("--seed", type=int, help="environment seed")
        sp.add_argument("--max-retries", type=int, dest="max_retries", help="attempts per setup tool call")

    r = sub.add_parser("run", help="run one feature")
    common(r)
    r.add_argument("--feature", required=True, help="feature id")
    r.add_argument("--transcript", help="scripted transcript for this run")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run every feature in the config")
    common(s)
    s.add_argument("--jobs", type=int, help="runs executed in parallel")
    s.set_defaults(func=cmd_suite)

    rep = sub.add_parser("report", help="render metrics tables from run directories")
    rep.add_argument("runs", nargs="*", help="run directories or directories containing them")
    rep.add_argument("--annotations", action="append", help="JSONL annotation file (repeatable)")
    rep.add_argument("--pricing", help="pricing table JSON")
    rep.add_argument("--json", help="also write the tables as JSON here")
    rep.set_defaults(func=cmd_report)

    fx = sub.add_parser("fixtures", help="write a runnable fixture suite")
    fx.add_argument("directory")
    fx.add_argument("--set", choices=("golden", "faults", "suite99"), default="golden")
    fx.set_defaults(func=cmd_fixtures)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FRAMEWORK_ERROR


if __name__ == "__main__":
    sys.exit(main())
