"""Config-driven audit runs: resolve a model, fit predictors, sample, evaluate, write reports."""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .backtracking import BacktrackingConditional, InsufficientRowsError, noninformative, parse_rule, sample_joint
from .criteria import Auditor, _result, parse_group, verdicts
from .language import dump
from .predictors import fit_logistic, fit_ols, make_constant, make_icf_fair, make_random, median_threshold, splice
from .scenarios import (
    HIRING_IMMUTABLE,
    LAW_IMMUTABLE,
    LAW_ROLES,
    SCENARIOS,
    ScenarioConfig,
    fit_law_school_scm,
    generate,
    load_law_school,
    scenario_model,
    subsample,
    synthetic_law_school,
)

CRITERIA = ("opportunity", "effort", "gce", "group-opportunity", "effort-equality")

COLUMNS = (
    "scenario",
    "predictor",
    "opportunity_set",
    "run",
    "subject",
    "criterion",
    "y",
    "y_star",
    "statistic",
    "threshold",
    "satisfied",
    "accepted_rows",
    "baseline_rows",
    "status",
)

HIRING_PREDICTORS = [
    {"name": "X1", "kind": "ols", "covariates": ["X1"]},
    {"name": "X2", "kind": "ols", "covariates": ["X2"]},
    {"name": "X1+X2", "kind": "ols", "covariates": ["X1", "X2"]},
    {"name": "X1+X2+Z_Ap", "kind": "ols", "covariates": ["X1", "X2", "Z_Ap"]},
    {"name": "Z_A", "kind": "ols", "covariates": ["Z_A"]},
    {"name": "all", "kind": "ols", "covariates": ["X1", "X2", "Z_A", "Z_Ap"]},
    {"name": "Random", "kind": "random"},
]

LAW_PREDICTORS = [
    {"name": "Random", "kind": "random"},
    {"name": "Full", "kind": "ols", "covariates": ["R", "X", "L", "G"]},
    {"name": "Unaware", "kind": "ols", "covariates": ["L", "G"]},
    {"name": "ICF Fair", "kind": "icf"},
]

DEFAULTS = {
    "n": 500,
    "n_star": 1000,
    "alpha": 0.05,
    "mmd_cap": 2000,
    "min_rows": 50,
    "n_perm": 200,
    "repetitions": 1,
    "criteria": ["opportunity"],
    "outcome_node": "Yhat",
    "recourse_only": False,
    "n_boot": 200,
}


class ConfigError(ValueError):
    pass


# -- config --------------------------------------------------------------------------


def load_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return normalize_config(raw, overrides)


def normalize_config(raw, overrides=None):
    """Fill defaults and check the shape of a config (variables are checked per model later)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    if "seed" not in cfg:
        raise ConfigError("config must set 'seed'")
    has_scen, has_data = "scenarios" in cfg, "dataset" in cfg
    if has_scen == has_data:
        raise ConfigError("config needs exactly one of 'scenarios' or 'dataset'")
    for k, v in DEFAULTS.items():
        cfg.setdefault(k, copy.deepcopy(v))
    if has_scen:
        cfg["scenarios"] = [cfg["scenarios"]] if isinstance(cfg["scenarios"], str) else list(cfg["scenarios"])
        bad = [s for s in cfg["scenarios"] if s not in SCENARIOS]
        if bad:
            raise ConfigError(f"unknown scenario(s): {', '.join(bad)}")
        cfg.setdefault("predictors", copy.deepcopy(HIRING_PREDICTORS))
        cfg.setdefault("target", "Y")
        cfg.setdefault("binarize", "threshold:0")
        if "mutable" not in cfg and "rules" not in cfg:
            cfg.setdefault("immutable", list(HIRING_IMMUTABLE))
        cfg.setdefault("opportunity_sets", {"S": ["X1", "X2", "Z_Ap"]})
        cfg.setdefault("baseline", {"kind": "other-group", "group_var": "A"})
        cfg.setdefault("groups", ["A=0", "A=1"])
    else:
        ds = cfg["dataset"]
        if not isinstance(ds, dict) or ("path" not in ds and "synthetic" not in ds):
            raise ConfigError("'dataset' needs 'path' (CSV) or 'synthetic' ({n, seed})")
        cfg.setdefault("predictors", copy.deepcopy(LAW_PREDICTORS))
        cfg.setdefault("target", "FYA")
        cfg.setdefault("binarize", "median")
        if "mutable" not in cfg and "rules" not in cfg:
            cfg.setdefault("immutable", list(LAW_IMMUTABLE))
        cfg.setdefault("opportunity_sets", {"L,U_L,U_G": ["L", "U_L", "U_G"], "U_L,U_G": ["U_L", "U_G"]})
        cfg.setdefault("baseline", {"kind": "other-group", "group_var": "R"})
        cfg.setdefault("groups", ["R=0", "R=1"])
    cfg["seed"] = _int(cfg, "seed")
    for k in ("n", "n_star", "n_perm", "repetitions", "min_rows", "n_boot"):
        cfg[k] = _int(cfg, k)
        if cfg[k] < 1:
            raise ConfigError(f"'{k}' must be >= 1")
    if cfg["mmd_cap"] is not None:
        cfg["mmd_cap"] = _int(cfg, "mmd_cap")
    if not 0.0 < float(cfg["alpha"]) <= 1.0:
        raise ConfigError("'alpha' must lie in (0, 1]")
    if isinstance(cfg["criteria"], str):
        cfg["criteria"] = [cfg["criteria"]]
    bad = [c for c in cfg["criteria"] if c not in CRITERIA]
    if bad:
        raise ConfigError(f"unknown criteria: {', '.join(bad)}; choose from {', '.join(CRITERIA)}")
    if isinstance(cfg["opportunity_sets"], list):
        cfg["opportunity_sets"] = {",".join(s): list(s) for s in cfg["opportunity_sets"]}
    names = [p.get("name") for p in cfg["predictors"]]
    for p in cfg["predictors"]:
        if p.get("kind") not in ("ols", "logistic", "random", "constant", "icf"):
            raise ConfigError(f"predictor {p.get('name')!r}: unknown kind {p.get('kind')!r}")
        p.setdefault("name", p["kind"] + ":" + "+".join(p.get("covariates", [])))
    names = [p["name"] for p in cfg["predictors"]]
    if len(set(names)) != len(names):
        raise ConfigError("predictor names must be unique")
    if isinstance(cfg["baseline"], str):
        cfg["baseline"] = {"kind": cfg["baseline"]}
    return cfg


def _int(cfg, key):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(f"'{key}' must be an integer")
    return int(v)


def _binarize_rule(text):
    if text in (None, "none"):
        return None
    if text == "median":
        return "median"
    if isinstance(text, str) and text.startswith("threshold:"):
        return ("threshold", float(text.split(":", 1)[1]))
    raise ConfigError(f"unknown binarization {text!r}; use 'median', 'threshold:<c>' or 'none'")


def _check_variables(cfg, model, factual):
    """Every variable a config names must exist once the predictor node is added."""
    node = cfg["outcome_node"]
    known = set(model.variables) | {node, f"U_{node}"}
    problems = []
    if cfg["target"] not in factual:
        problems.append(f"target: unknown column {cfg['target']!r}")

    def need(names, where, extra=()):
        for n in names:
            if n not in known and n not in extra:
                problems.append(f"{where}: unknown variable {n!r}")

    for p in cfg["predictors"]:
        need(p.get("covariates", []), f"predictor {p['name']!r}")
    for label, members in cfg["opportunity_sets"].items():
        need(members, f"opportunity set {label!r}")
    need(cfg.get("immutable", []), "immutable")
    need(cfg.get("mutable", []), "mutable")
    need(cfg.get("rules", {}).keys(), "rules")
    base = cfg["baseline"]
    if base.get("group_var"):
        need([base["group_var"]], "baseline")
    need(base.get("match", []), "baseline")
    for g in cfg["groups"]:
        need([n for n, _ in parse_group(g).values], f"group {g!r}")
    if problems:
        raise ConfigError("; ".join(problems))


# -- model resolution ---------------------------------------------------------------------


@dataclass
class Resolved:
    label: str
    model: object
    factual: dict
    fits: dict = field(default_factory=dict)


def resolve_hiring(name, n, seed):
    model, factual = generate(ScenarioConfig(name, n, seed))
    return Resolved(name, model, factual)


def resolve_dataset(ds, seed):
    if "path" in ds:
        records = load_law_school(ds["path"], ds.get("mapping"), ds.get("on_error", "raise"))
        label = os.path.basename(ds["path"])
    else:
        syn = ds["synthetic"]
        records = synthetic_law_school(int(syn.get("n", 6000)), int(syn.get("seed", seed)))
        label = "law-synthetic"
    if ds.get("subsample"):
        records = subsample(records, int(ds["subsample"]), seed)
    model, factual, fits = fit_law_school_scm(records, seed=seed)
    return Resolved(label, model, factual, fits)


def build_predictor(spec, factual, target, rule):
    kind = spec["kind"]
    name = spec["name"]
    if kind == "random":
        return make_random(p=float(spec.get("p", 0.5)), name=name)
    if kind == "constant":
        return make_constant(float(spec.get("value", 0.0)), name=name)
    if kind == "icf":
        pred, _, _ = make_icf_fair(factual, {**LAW_ROLES, "outcome": target}, name=name)
    elif kind == "ols":
        pred, _ = fit_ols(factual, target, spec["covariates"], name=name)
    else:
        pred, _ = fit_logistic(factual, target, spec["covariates"], name=name)
    rule = _binarize_rule(spec["binarize"]) if "binarize" in spec else rule
    if rule == "median":
        return median_threshold(pred, factual)
    if rule is not None:
        return pred.with_threshold(rule[1])
    return pred


def conditional_for(cfg, model):
    if "rules" in cfg:
        rules = {u: parse_rule(cfg["rules"].get(u, "keep" if u in cfg.get("immutable", []) else "resample")) for u in model.exogenous}
        return BacktrackingConditional(rules)
    if "mutable" in cfg:
        mutable = set(cfg["mutable"]) | {u for u in model.exogenous if u == f"U_{cfg['outcome_node']}"}
        return noninformative(model, mutable)
    frozen = set(cfg.get("immutable", []))
    return noninformative(model, [u for u in model.exogenous if u not in frozen])


# -- running ---------------------------------------------------------------------------------


def _row(scenario, predictor, sset, run, r):
    row = {"scenario": scenario, "predictor": predictor, "opportunity_set": sset, "run": run}
    row.update(r.as_row())
    return row


def run_audit(cfg, progress=None):
    """Run a normalized config; returns ``(individual_rows, group_rows, summary)``."""
    t0 = time.perf_counter()
    individual, groups_out, rates = [], [], []
    timings = {}
    rule = _binarize_rule(cfg["binarize"])
    labels = cfg["scenarios"] if "scenarios" in cfg else [None]
    base = cfg["baseline"]
    groups = [parse_group(g) for g in cfg["groups"]]
    node = cfg["outcome_node"]
    checked = set()
    if "scenarios" in cfg:
        for label in labels:
            model = scenario_model(label)
            _check_variables(cfg, model, dict.fromkeys(model.variables))
            checked.add(label)
    for label in labels:
        for run in range(cfg["repetitions"]):
            seed = cfg["seed"] + run
            t_run = time.perf_counter()
            res = resolve_hiring(label, cfg["n"], seed) if label else resolve_dataset(cfg["dataset"], seed)
            if res.label not in checked:
                _check_variables(cfg, res.model, res.factual)
                checked.add(res.label)
            for spec in cfg["predictors"]:
                pred = build_predictor(spec, res.factual, cfg["target"], rule)
                model = splice(res.model, pred, as_node=node)
                factual = dict(res.factual)
                n = len(factual["id"])
                slot = f"U_{node}"
                if pred.kind == "random":
                    draw = _rng.stream(seed, "predictor", spec["name"]).random(n)
                    factual[slot] = (draw < pred.p).astype(float)
                else:
                    factual[slot] = np.zeros(n)
                cond = conditional_for(cfg, model)
                table = sample_joint(model, cond, factual, cfg["n_star"], seed)
                for sset, members in cfg["opportunity_sets"].items():
                    aud = Auditor(
                        table,
                        members,
                        outcome=node,
                        alpha=float(cfg["alpha"]),
                        n_perm=cfg["n_perm"],
                        mmd_cap=cfg["mmd_cap"],
                        min_rows=cfg["min_rows"],
                        seed=seed,
                    )
                    key = (res.label, spec["name"], sset, run)
                    ind, grp = _evaluate(cfg, aud, base, groups)
                    individual += [_row(*key, r) for r in ind]
                    groups_out += [_row(*key, r) for r in grp]
                    rates += _rates(key, ind + grp)
                    if progress:
                        progress(key)
            timings[f"{res.label}/run{run}"] = round(time.perf_counter() - t_run, 3)
    summary = {
        "config": cfg,
        "pass_rates": rates,
        "runtimes": {"total_seconds": round(time.perf_counter() - t0, 3), "runs": timings},
    }
    return individual, groups_out, summary


def _evaluate(cfg, aud, base, groups):
    ind, grp = [], []
    crit = cfg["criteria"]
    if "opportunity" in crit:
        ind += aud.individual_opportunities(
            baseline=base.get("kind", "other-group"),
            group_var=base.get("group_var"),
            match=tuple(base.get("match", ())),
        )
    if "effort" in crit:
        eff = aud.efforts(flip=True)
        if cfg["recourse_only"]:
            eff = [r for r in eff if r.y == 0.0]
        ind += eff
    pairs = [(groups[a], groups[b]) for a in range(len(groups)) for b in range(a + 1, len(groups))]
    directions = [(0.0, 1.0)] if cfg["recourse_only"] else [(0.0, 1.0), (1.0, 0.0)]
    if "gce" in crit:
        for g in groups:
            for y, ys in directions:
                grp.append(_gce_row(aud, g, y, ys))
    if "group-opportunity" in crit:
        for g, h in pairs:
            for ys in (0.0, 1.0):
                grp.append(aud.group_opportunity_equality(g, h, ys))
    if "effort-equality" in crit:
        for g, h in pairs:
            for y, ys in directions:
                try:
                    grp.append(aud.group_effort_equality(g, h, y, ys, n_boot=cfg["n_boot"]))
                except (ValueError, InsufficientRowsError) as exc:
                    warnings.warn(f"effort equality {g} vs {h}: {exc}")
    return ind, grp


def _gce_row(aud, g, y, ys):
    try:
        value, n_real, n_cf = aud.gce(g, y, ys)
        return _result(str(g), "gce", y, ys, value, math.inf, n_cf, n_real)
    except (ValueError, InsufficientRowsError) as exc:
        warnings.warn(f"GCE({g}) y={y} -> {ys}: {exc}")
        return _result(str(g), "gce", y, ys, math.inf, math.nan, 0, 0, "infeasible")


def _rates(key, results):
    out = []
    by_crit = {}
    for r in results:
        if r.criterion in ("gce",) or r.criterion == "effort":
            continue
        by_crit.setdefault(r.criterion, []).append(r)
    for name, rs in sorted(by_crit.items()):
        v = verdicts(rs)
        out.append(
            {
                "scenario": key[0],
                "predictor": key[1],
                "opportunity_set": key[2],
                "run": key[3],
                "criterion": name,
                "subjects": len(v),
                "satisfied": int(sum(v.values())),
                "rate": (sum(v.values()) / len(v)) if v else None,
                "infeasible": sum(1 for r in rs if r.status == "infeasible"),
                "skipped": sum(1 for r in rs if r.status == "skipped"),
            }
        )
    return out


# -- writing -----------------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows, columns=COLUMNS):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def boxplot_rows(rows):
    """Five-number summaries of finite statistics per (scenario, predictor, set, criterion, y*)."""
    groups = {}
    for r in rows:
        key = (r["scenario"], r["predictor"], r["opportunity_set"], r["criterion"], r["y_star"])
        groups.setdefault(key, []).append(r["statistic"])
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        vals = np.array(groups[key], dtype=float)
        fin = vals[np.isfinite(vals)]
        q = np.quantile(fin, [0.0, 0.25, 0.5, 0.75, 1.0]) if len(fin) else [math.nan] * 5
        out.append(
            dict(
                zip(
                    ("scenario", "predictor", "opportunity_set", "criterion", "y_star"),
                    key,
                ),
                n=len(vals),
                infinite=int(np.isinf(vals).sum()),
                min=float(q[0]),
                q1=float(q[1]),
                median=float(q[2]),
                q3=float(q[3]),
                max=float(q[4]),
            )
        )
    return out


BOX_COLUMNS = ("scenario", "predictor", "opportunity_set", "criterion", "y_star", "n", "infinite", "min", "q1", "median", "q3", "max")


def write_report(out_dir, individual, groups, summary):
    os.makedirs(out_dir, exist_ok=True)
    write_rows(os.path.join(out_dir, "individual.csv"), individual)
    write_rows(os.path.join(out_dir, "group.csv"), groups)
    write_rows(os.path.join(out_dir, "plot_individual.csv"), boxplot_rows(individual), BOX_COLUMNS)
    gce = [r for r in groups if r["criterion"] == "gce"]
    write_rows(os.path.join(out_dir, "plot_group_effort.csv"), gce)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# -- generate / report helpers ---------------------------------------------------------------------


def write_dataset(out_dir, model, factual, meta):
    """Model description, factual CSV (id, U..., V...) and a meta sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "model.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump(model))
    names = ["id"] + list(model.exogenous) + list(model.endogenous)
    extra = [k for k in factual if k not in names]
    cols = names + extra
    with open(os.path.join(out_dir, "factual.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(factual["id"])):
            w.writerow([int(factual["id"][i])] + [repr(float(factual[c][i])) for c in cols[1:]])
    with open(os.path.join(out_dir, "factual.meta.json"), "w", encoding="utf-8") as fh:
        json.dump({**meta, "rows": len(factual["id"]), "columns": cols}, fh, indent=2, sort_keys=True)
        fh.write("\n")


class ReportError(RuntimeError):
    pass


def read_summary(report_dir):
    path = os.path.join(report_dir, "summary.json")
    if not os.path.isdir(report_dir):
        raise ReportError(f"{report_dir}: no such report directory")
    if not os.path.exists(path):
        raise ReportError(f"{path}: missing report (run 'audit' first)")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: corrupt JSON ({exc})") from None
    if not isinstance(data, dict) or "pass_rates" not in data:
        raise ReportError(f"{path}: not an audit summary")
    return data


def format_report(summary):
    """Pass-rate table in stable order; rows with any violation are flagged."""
    rows = sorted(
        summary["pass_rates"],
        key=lambda r: (str(r["scenario"]), str(r["criterion"]), str(r["opportunity_set"]), str(r["predictor"]), r["run"]),
    )
    head = ("scenario", "criterion", "opportunity_set", "predictor", "run", "satisfied", "rate", "flag")
    table = [head]
    for r in rows:
        rate = r["rate"]
        flag = "" if rate == 1.0 else "VIOLATED"
        table.append(
            (
                str(r["scenario"]),
                r["criterion"],
                r["opportunity_set"],
                r["predictor"],
                str(r["run"]),
                f"{r['satisfied']}/{r['subjects']}",
                "n/a" if rate is None else f"{rate:.3f}",
                flag,
            )
        )
    widths = [max(len(row[j]) for row in table) for j in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines)
