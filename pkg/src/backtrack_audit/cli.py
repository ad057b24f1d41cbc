"""Command line: ``generate``, ``audit`` and ``report``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from . import audit as pipeline
from .scenarios import SCENARIOS, ScenarioConfig, fit_law_school_scm, generate, load_law_school


def _common(p):
    p.add_argument("--n", type=int, help="individuals to simulate")
    p.add_argument("--n-star", type=int, dest="n_star", help="counterfactual draws per individual (default 1000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="test level (default 0.05)")
    p.add_argument("--mmd-cap", type=int, dest="mmd_cap", help="max rows per energy-statistic sample (default 2000)")
    p.add_argument("--min-rows", type=int, dest="min_rows", help="min accepted rows per conditional (default 50)")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="backtrack-audit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a simulated or fitted factual dataset")
    g.add_argument("--scenario", choices=sorted(SCENARIOS))
    g.add_argument("--data", help="law-school CSV to fit instead of a scenario")
    g.add_argument("--mapping", help="JSON file with the column/category mapping for --data")
    g.add_argument("--skip-bad-rows", action="store_true", help="skip unparseable CSV rows instead of failing")
    _common(g)

    a = sub.add_parser("audit", help="run an audit config")
    a.add_argument("config", help="JSON audit config")
    a.add_argument("--scenario", choices=sorted(SCENARIOS), help="override the config's scenarios")
    a.add_argument("--data", help="override the config's dataset path")
    a.add_argument("--mapping", help="JSON mapping for --data")
    _common(a)

    r = sub.add_parser("report", help="print the pass-rate table of an audit")
    r.add_argument("report_dir")
    return parser


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise pipeline.ConfigError(f"{path}: {exc}") from None


def cmd_generate(args):
    seed = 0 if args.seed is None else args.seed
    out = args.out or "."
    if args.scenario:
        n = 500 if args.n is None else args.n
        model, factual = generate(ScenarioConfig(args.scenario, n, seed))
        meta = {"scenario": args.scenario, "n": n, "seed": seed}
    else:
        mapping = _read_json(args.mapping) if args.mapping else None
        records = load_law_school(args.data, mapping, "skip" if args.skip_bad_rows else "raise")
        model, factual, _ = fit_law_school_scm(records, seed=seed)
        meta = {"data": args.data, "seed": seed, "records": len(records)}
    pipeline.write_dataset(out, model, factual, meta)
    print(f"wrote {len(factual['id'])} rows to {out}")
    return 0


def cmd_audit(args):
    raw = _read_json(args.config)
    if args.scenario:
        raw.pop("dataset", None)
        raw["scenarios"] = [args.scenario]
    if args.data:
        raw.pop("scenarios", None)
        raw["dataset"] = {**raw.get("dataset", {}), "path": args.data}
        raw["dataset"].pop("synthetic", None)
        if args.mapping:
            raw["dataset"]["mapping"] = _read_json(args.mapping)
    overrides = {k: getattr(args, k) for k in ("n", "n_star", "seed", "alpha", "mmd_cap", "min_rows")}
    cfg = pipeline.normalize_config(raw, overrides)
    out = args.out or raw.get("out") or "report"
    individual, groups, summary = pipeline.run_audit(cfg)
    pipeline.write_report(out, individual, groups, summary)
    print(f"wrote {len(individual)} individual and {len(groups)} group rows to {out}")
    return 0


def cmd_report(args):
    print(pipeline.format_report(pipeline.read_summary(args.report_dir)))
    return 0


COMMANDS = {"generate": cmd_generate, "audit": cmd_audit, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and bool(args.scenario) == bool(args.data):
        parser.error("generate needs exactly one of --scenario or --data")
    warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except (pipeline.ConfigError, pipeline.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"error [{module}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
