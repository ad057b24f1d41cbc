"""Backtracking counterfactual sampling.

A backtracking conditional assigns one rule to every exogenous variable:

``keep``       U* = U (immutable)
``resample``   U* drawn from its prior (mutable)
``kernel``     U* ~ N(U, bandwidth^2)
``pin``        U* = constant

:func:`sample_joint` draws ``n_star`` counterfactual worlds per factual row and
predicts V* with the unchanged mechanisms; :func:`condition` realizes
conditioning on counterfactual evidence by rejection.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import _rng
from .language import fingerprint
from .scm_core import CausalModel, ModelError, _simulate, forward, raw_variates, thread_count

FACTUAL, COUNTERFACTUAL = "factual", "counterfactual"


class InsufficientRowsError(RuntimeError):
    """Too few rows survived conditioning; raise n_star or relax the predicate."""

    def __init__(self, accepted, required, what=""):
        super().__init__(f"{what + ': ' if what else ''}{accepted} accepted rows, need {required}")
        self.accepted = accepted
        self.required = required


# -- conditionals ---------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("keep", "resample", "kernel", "pin"):
            raise ModelError(f"unknown backtracking rule {self.kind!r}")
        if self.kind == "kernel" and not self.value > 0:
            raise ModelError("kernel bandwidth must be > 0")

    def __str__(self):
        if self.kind == "kernel":
            return f"kernel({self.value!r})"
        if self.kind == "pin":
            return f"pin({self.value!r})"
        return self.kind


KEEP = Rule("keep")
RESAMPLE = Rule("resample")


def kernel(bandwidth):
    return Rule("kernel", float(bandwidth))


def pin(value):
    return Rule("pin", float(value))


def parse_rule(text):
    text = str(text).strip()
    if text in ("keep", "resample"):
        return Rule(text)
    for kind in ("kernel", "pin"):
        if text.startswith(kind + "(") and text.endswith(")"):
            return Rule(kind, float(text[len(kind) + 1 : -1]))
    raise ModelError(f"cannot parse backtracking rule {text!r}")


@dataclass(frozen=True)
class BacktrackingConditional:
    rules: Mapping[str, Rule]

    def validate(self, model: CausalModel):
        extra = sorted(set(self.rules) - set(model.exogenous))
        if extra:
            raise ModelError(f"rules for unknown exogenous variable(s): {', '.join(extra)}")
        missing = [u for u in model.exogenous if u not in self.rules]
        if missing:
            raise ModelError(f"no backtracking rule for: {', '.join(missing)}")

    @property
    def mutable(self):
        return frozenset(u for u, r in self.rules.items() if r.kind != "keep")

    def as_dict(self):
        return {u: str(r) for u, r in sorted(self.rules.items())}

    def fingerprint(self):
        text = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def noninformative(model: CausalModel, mutable) -> BacktrackingConditional:
    """Mutable exogenous variables resampled from the prior, all others kept."""
    mutable = set(mutable)
    unknown = sorted(mutable - set(model.exogenous))
    if unknown:
        raise ModelError(f"unknown exogenous variable(s) in mutable set: {', '.join(unknown)}")
    return BacktrackingConditional({u: RESAMPLE if u in mutable else KEEP for u in model.exogenous})


# -- the table ------------------------------------------------------------------


@dataclass(frozen=True)
class CounterfactualTable:
    """Rows ``(id, U, V, U*, V*)``; factual columns are stored once per individual.

    Rows are grouped by individual in factual order; ``pos[r]`` is the index of
    row ``r``'s individual in ``ids``/``factual``.
    """

    exogenous: tuple
    endogenous: tuple
    ids: np.ndarray
    factual: Mapping[str, np.ndarray]
    pos: np.ndarray
    star: Mapping[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pos)

    @property
    def names(self):
        return self.exogenous + self.endogenous

    def column(self, name, world=COUNTERFACTUAL):
        if name not in self.factual:
            raise KeyError(f"unknown variable {name!r}")
        if world == COUNTERFACTUAL:
            return self.star[name]
        if world == FACTUAL:
            return self.factual[name][self.pos]
        raise KeyError(f"unknown world {world!r}")

    def row_ids(self):
        return self.ids[self.pos]

    def individual(self, ident):
        """Position of individual ``ident`` in the factual arrays."""
        hits = np.flatnonzero(self.ids == ident)
        if len(hits) == 0:
            raise KeyError(f"individual {ident!r} not in table")
        return int(hits[0])

    def rows_of(self, ident):
        p = self.individual(ident)
        lo, hi = np.searchsorted(self.pos, [p, p + 1])
        return slice(int(lo), int(hi))

    def take(self, rows, **meta):
        """Sub-table over a row selection (slice, index array or mask)."""
        return replace(
            self,
            pos=self.pos[rows],
            star={k: v[rows] for k, v in self.star.items()},
            meta={**self.meta, **meta},
        )

    # serialization

    def header(self):
        return (
            ["id"]
            + list(self.exogenous)
            + list(self.endogenous)
            + [f"{n}_star" for n in self.exogenous]
            + [f"{n}_star" for n in self.endogenous]
        )

    def to_csv(self, path):
        """Flat CSV plus a ``.meta.json`` sidecar next to it."""
        cols = [self.row_ids()]
        cols += [self.column(n, FACTUAL) for n in self.names]
        cols += [self.star[n] for n in self.names]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in zip(*cols):
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
        with open(_sidecar(path), "w", encoding="utf-8") as fh:
            json.dump(
                {"exogenous": list(self.exogenous), "endogenous": list(self.endogenous), **self.meta},
                fh,
                indent=2,
                sort_keys=True,
            )

    @classmethod
    def read_csv(cls, path):
        with open(_sidecar(path), encoding="utf-8") as fh:
            meta = json.load(fh)
        exo, endo = tuple(meta.pop("exogenous")), tuple(meta.pop("endogenous"))
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(x) for x in row] for row in reader], dtype=float).reshape(-1, len(header))
        col = {h: data[:, j] for j, h in enumerate(header)}
        row_ids = col["id"].astype(np.int64)
        ids, first, pos = np.unique(row_ids, return_index=True, return_inverse=True)
        order = np.argsort(first)
        ids, first = ids[order], first[order]
        remap = np.empty_like(order)
        remap[order] = np.arange(len(order))
        names = exo + endo
        return cls(
            exogenous=exo,
            endogenous=endo,
            ids=ids,
            factual={n: col[n][first] for n in names},
            pos=remap[pos],
            star={n: col[f"{n}_star"] for n in names},
            meta=meta,
        )


def _sidecar(path):
    path = str(path)
    return (path[:-4] if path.endswith(".csv") else path) + ".meta.json"


# -- Algorithm: abduction, cross-world abduction, prediction ------------------------


def factual_table(model: CausalModel, u, ids=None):
    """Factual columns ``{id, U..., V...}`` from exogenous columns ``u``."""
    u = {name: np.asarray(u[name], dtype=float) for name in model.exogenous}
    n = len(next(iter(u.values())))
    out = {"id": np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)}
    out.update(u)
    out.update(forward(model, u))
    return out


def sample_joint(
    model: CausalModel,
    cond: BacktrackingConditional,
    factual,
    n_star: int,
    seed: int,
    workers=None,
) -> CounterfactualTable:
    """Draw ``n_star`` counterfactual worlds for every factual row.

    ``factual`` maps ``id`` and every exogenous name to columns (abduced or
    recorded); endogenous columns, if given, must agree with the model.
    Each individual's draws come from its own ``(seed, id)`` stream, so the
    output does not depend on ``workers``.
    """
    cond.validate(model)
    if n_star < 1:
        raise ModelError("n_star must be >= 1")
    missing = [u for u in model.exogenous if u not in factual]
    if missing:
        raise ModelError(f"factual rows missing exogenous value(s): {', '.join(missing)}")
    u = {name: np.asarray(factual[name], dtype=float) for name in model.exogenous}
    n = len(u[model.exogenous[0]])
    ids = np.asarray(factual.get("id", np.arange(n)), dtype=np.int64)
    if len(np.unique(ids)) != n or (ids < 0).any():
        raise ModelError("factual ids must be unique non-negative integers")
    v = forward(model, u)
    for name in model.endogenous:
        if name in factual and not np.array_equal(np.asarray(factual[name], dtype=float), v[name]):
            if not np.allclose(factual[name], v[name], rtol=1e-9, atol=1e-9):
                raise ModelError(f"factual column {name} disagrees with forward(model, U)")

    width = len(model.exogenous)

    def draws(i):
        return raw_variates(_rng.stream(seed, "backtrack", int(ids[i])), n_star, width)

    workers = workers or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(draws, range(n)))
    else:
        parts = [draws(i) for i in range(n)]
    z = np.concatenate([p[0] for p in parts]) if parts else np.empty((0, width))
    w = np.concatenate([p[1] for p in parts]) if parts else np.empty((0, width))
    pos = np.repeat(np.arange(n), n_star)

    overrides = {}
    for j, name in enumerate(model.exogenous):
        rule = cond.rules[name]
        if rule.kind == "keep":
            overrides[name] = u[name][pos]
        elif rule.kind == "pin":
            overrides[name] = np.full(len(pos), rule.value)
        elif rule.kind == "kernel":
            overrides[name] = u[name][pos] + rule.value * z[:, j]
    star = _simulate(model, z, w, overrides)

    meta = {
        "model": fingerprint(model),
        "conditional": cond.fingerprint(),
        "seed": int(seed),
        "n": int(n),
        "n_star": int(n_star),
    }
    return CounterfactualTable(
        exogenous=model.exogenous,
        endogenous=model.endogenous,
        ids=ids,
        factual={**u, **v},
        pos=pos,
        star={name: star[name] for name in model.variables},
        meta=meta,
    )


def verify_table(model: CausalModel, table: CounterfactualTable):
    """Recompute V and V* with the model's mechanisms; raise on any difference."""
    v = forward(model, {n: table.factual[n] for n in model.exogenous})
    v_star = forward(model, {n: table.star[n] for n in model.exogenous})
    for name in model.endogenous:
        if not np.array_equal(v[name], table.factual[name]):
            raise ModelError(f"factual {name} does not match forward(U)")
        if not np.array_equal(v_star[name], table.star[name]):
            raise ModelError(f"counterfactual {name} does not match forward(U*)")


# -- conditioning and projection -------------------------------------------------------


_OPS = {
    "=": np.equal,
    "==": np.equal,
    "!=": np.not_equal,
    ">": np.greater,
    "<=": np.less_equal,
    "<": np.less,
    ">=": np.greater_equal,
}


@dataclass(frozen=True)
class Clause:
    variable: str
    world: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown comparator {self.op!r}")
        if self.world not in (FACTUAL, COUNTERFACTUAL):
            raise ValueError(f"unknown world {self.world!r}")

    def __str__(self):
        star = "*" if self.world == COUNTERFACTUAL else ""
        return f"{self.variable}{star} {self.op} {self.value!r}"


def cf(variable, op, value):
    return Clause(variable, COUNTERFACTUAL, op, float(value))


def fact(variable, op, value):
    return Clause(variable, FACTUAL, op, float(value))


@dataclass(frozen=True)
class Predicate:
    clauses: tuple = ()

    def __and__(self, other):
        return Predicate(self.clauses + other.clauses)

    def mask(self, table: CounterfactualTable):
        keep = np.ones(len(table), dtype=bool)
        for c in self.clauses:
            if c.variable not in table.factual:
                raise KeyError(f"predicate references unknown variable {c.variable!r}")
            keep &= _OPS[c.op](table.column(c.variable, c.world), c.value)
        return keep

    def __str__(self):
        return ", ".join(str(c) for c in self.clauses) or "true"


def where(*clauses):
    return Predicate(tuple(clauses))


def condition(table: CounterfactualTable, pred: Predicate, min_rows: int = 50) -> CounterfactualTable:
    """Rows satisfying every clause, in their original order."""
    if len(table) == 0:
        raise ValueError("cannot condition an empty table")
    keep = pred.mask(table)
    accepted = int(keep.sum())
    if accepted < min_rows:
        raise InsufficientRowsError(accepted, min_rows, str(pred))
    return table.take(
        keep,
        accepted=accepted,
        rejected=len(table) - accepted,
        acceptance_rate=accepted / len(table),
    )


def parse_var(spec):
    """``'X*'`` -> ``('X', counterfactual)``; ``'X'`` -> ``('X', factual)``."""
    if isinstance(spec, tuple):
        return spec
    spec = str(spec)
    if spec.endswith("*"):
        return spec[:-1], COUNTERFACTUAL
    return spec, FACTUAL


def project(table: CounterfactualTable, variables) -> np.ndarray:
    """Numeric matrix with one column per ``(name, world)`` and one row per table row."""
    variables = [parse_var(v) for v in variables]
    if not variables:
        raise ValueError("project needs at least one variable")
    cols = []
    for name, world in variables:
        try:
            cols.append(table.column(name, world))
        except KeyError as exc:
            raise KeyError(f"cannot project {name!r} in world {world!r}") from exc
    return np.column_stack(cols) if cols else np.empty((len(table), 0))

