"""Opportunity and effort quantities over a counterfactual table, plus the equality criteria.

Naming of the conditionals, with ``S`` an opportunity set and ``Yhat`` the
predictor node:

* individual counterfactual opportunity: S* of one individual's rows with Yhat* = y*
* group counterfactual opportunity: S* of the rows of group g with Yhat* = y*
* realized opportunity: factual S (of one individual, or of group g with Yhat = y)
* individual effort: point cost of the realized s against the individual's opportunity
* group effort (GCE): energy distance between the group's realized S given Yhat = y
  and the same members' S* given Yhat* = y*

:class:`Auditor` evaluates these for every individual of a table while
sharing projected columns and baseline row lookups; the module-level
functions are one-shot conveniences over the same code.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import _rng
from .backtracking import CounterfactualTable, InsufficientRowsError, cf, condition, project, where
from .divergence import BaselinePool, energy_mmd, point_cost
from .scm_core import thread_count

OUTCOME = "Yhat"
BASELINES = ("population", "recourse", "same-covariates", "other-group")
INFEASIBLE = math.inf


@dataclass(frozen=True)
class GroupSpec:
    """Factual selection ``var1 = v1, var2 = v2, ...``."""

    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ValueError("a group needs at least one defining variable")

    def __str__(self):
        return ",".join(f"{k}={_fmt(v)}" for k, v in self.values)

    def individuals(self, table):
        keep = np.ones(len(table.ids), dtype=bool)
        for name, value in self.values:
            if name not in table.factual:
                raise KeyError(f"group references unknown variable {name!r}")
            keep &= table.factual[name] == value
        return keep


def group(**values):
    return GroupSpec(tuple((k, float(v)) for k, v in values.items()))


def parse_group(text):
    """``"A=0"`` or ``"R=1,X=0"`` -> GroupSpec."""
    parts = []
    for item in str(text).split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"cannot parse group {text!r}; expected name=value")
        parts.append((name.strip(), float(value)))
    return GroupSpec(tuple(parts))


def _fmt(v):
    v = float(v)
    return str(int(v)) if v == int(v) else repr(v)


def check_opportunity_set(table_or_model, members, cond=None):
    """Validate ``members``; warn about immutable members (they never vary counterfactually)."""
    members = tuple(members)
    if not members:
        raise ValueError("opportunity set is empty")
    names = set(getattr(table_or_model, "names", None) or table_or_model.variables)
    unknown = [m for m in members if m not in names]
    if unknown:
        raise KeyError(f"opportunity set member(s) not in model: {', '.join(unknown)}")
    if cond is not None:
        frozen = [m for m in members if m in cond.rules and cond.rules[m].kind == "keep"]
        if frozen:
            warnings.warn(f"opportunity set member(s) held fixed by the conditional: {', '.join(frozen)}")
    return members


@dataclass(frozen=True)
class CriterionResult:
    """One evaluated comparison; ``satisfied`` iff ``statistic <= threshold``.

    ``status`` is ``ok``, ``infeasible`` (the subject's conditional is empty
    or too small, statistic is +inf) or ``skipped`` (the comparison side is
    too small; excluded from pass rates).
    """

    subject: str
    criterion: str
    y: float | None
    y_star: float
    statistic: float
    threshold: float
    satisfied: bool
    accepted_rows: int
    baseline_rows: int = 0
    status: str = "ok"

    def __post_init__(self):
        if self.satisfied != bool(self.statistic <= self.threshold):
            raise ValueError("satisfied must equal statistic <= threshold")

    def as_row(self):
        return asdict(self)


def _result(subject, criterion, y, y_star, stat, thr, accepted, baseline_rows=0, status="ok"):
    return CriterionResult(
        subject=str(subject),
        criterion=criterion,
        y=None if y is None else float(y),
        y_star=float(y_star),
        statistic=float(stat),
        threshold=float(thr),
        satisfied=bool(stat <= thr),
        accepted_rows=int(accepted),
        baseline_rows=int(baseline_rows),
        status=status,
    )


class Auditor:
    """Criterion engine for one table and one opportunity set.

    ``mmd_cap`` bounds each sample entering an energy statistic (seeded
    subsample); ``n_perm`` permutations calibrate every test at ``alpha``.
    All permutation tests share the label sets drawn from ``seed``, and every
    subsample is keyed by what it represents, so results do not depend on
    evaluation order or on the number of worker threads.
    """

    def __init__(
        self,
        table: CounterfactualTable,
        S,
        outcome=OUTCOME,
        alpha=0.05,
        n_perm=200,
        mmd_cap=2000,
        min_rows=50,
        seed=0,
        workers=None,
    ):
        self.table = table
        self.S = check_opportunity_set(table, S)
        if outcome not in table.factual:
            raise KeyError(f"outcome {outcome!r} not in table")
        self.outcome = outcome
        self.alpha = alpha
        self.n_perm = n_perm
        self.mmd_cap = mmd_cap
        self.min_rows = min_rows
        self.seed = int(seed)
        self.workers = workers or thread_count()
        self.s_star = project(table, [m + "*" for m in self.S])
        self.s_fact = np.column_stack([table.factual[m] for m in self.S])
        self.y_star = table.star[outcome]
        self.y = table.factual[outcome]
        self.pos = table.pos
        self._baseline_index = {}
        self._starts = np.searchsorted(self.pos, np.arange(len(table.ids) + 1))

    # samples

    def _cap(self, x, *tag):
        return _rng.subsample_rows(x, self.mmd_cap, _rng.stream(self.seed, "cap", *tag))

    def rows_of(self, i):
        return slice(int(self._starts[i]), int(self._starts[i + 1]))

    def individual_sample(self, i, y_star):
        """Capped S* rows of individual ``i`` (positional) with Yhat* = y*, plus the accepted count."""
        sl = self.rows_of(i)
        hit = self.y_star[sl] == y_star
        sample = self.s_star[sl][hit]
        return self._cap(sample, "individual", int(self.table.ids[i]), _rng.key(repr(float(y_star)))), int(hit.sum())

    def _baseline_key(self, kind, i, group_var, match):
        """Cache key identifying the comparison population for individual ``i``."""
        fact = self.table.factual
        if kind == "population":
            return ("population",)
        if kind == "recourse":
            return ("recourse", float(self.y[i]))
        if kind == "other-group":
            if group_var is None:
                raise ValueError("baseline 'other-group' needs group_var")
            return ("other-group", group_var, float(fact[group_var][i]))
        if kind == "same-covariates":
            if not match:
                raise ValueError("baseline 'same-covariates' needs match variables")
            return ("same-covariates", tuple(match), tuple(float(fact[m][i]) for m in match))
        raise ValueError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")

    def _baseline_rows(self, key):
        fact = self.table.factual
        kind = key[0]
        if kind == "population":
            return np.ones(len(self.pos), dtype=bool)
        if kind == "recourse":
            return self.y[self.pos] == key[1]
        if kind == "other-group":
            return fact[key[1]][self.pos] != key[2]
        keep = np.ones(len(self.pos), dtype=bool)
        for m, v in zip(key[1], key[2]):
            keep &= fact[m][self.pos] == v
        return keep

    def baseline_rows(self, kind, i, y_star, group_var=None, match=()):
        """Key and row indices of the comparison population for individual ``i`` at y*."""
        key = self._baseline_key(kind, i, group_var, match) + (float(y_star),)
        if key not in self._baseline_index:
            self._baseline_index[key] = np.flatnonzero(self._baseline_rows(key[:-1]) & (self.y_star == y_star))
        return key, self._baseline_index[key]

    def baseline_sample(self, kind, i, y_star, group_var=None, match=()):
        """Comparison sample for individual ``i`` and the population's row count.

        Each individual gets its own seeded subsample of the comparison
        population, so the per-individual tests are not all tied to one draw.
        Returns ``(None, rows)`` when the population has fewer than ``min_rows``.
        """
        key, idx = self.baseline_rows(kind, i, y_star, group_var, match)
        if len(idx) < self.min_rows:
            return None, len(idx)
        if self.mmd_cap is not None and len(idx) > self.mmd_cap:
            rng = _rng.stream(self.seed, "baseline", int(self.table.ids[i]), repr(key))
            idx = idx[np.sort(rng.choice(len(idx), self.mmd_cap, replace=False))]
        return self.s_star[idx], len(self._baseline_index[key])

    # criteria

    def individual_opportunity(self, i, y_star, baseline="population", group_var=None, match=(), alpha=None):
        """Individual equality of counterfactual opportunity for positional individual ``i``."""
        alpha = self.alpha if alpha is None else alpha
        ident = int(self.table.ids[i])
        y = float(self.y[i])
        base, base_rows = self.baseline_sample(baseline, i, y_star, group_var, match)
        sample, accepted = self.individual_sample(i, y_star)
        crit = f"opportunity:{baseline}"
        if base is None:
            warnings.warn(f"baseline for y*={_fmt(y_star)} has {base_rows} rows; comparison skipped")
            return _result(ident, crit, y, y_star, math.nan, math.nan, accepted, base_rows, "skipped")
        if accepted < self.min_rows:
            return _result(ident, crit, y, y_star, INFEASIBLE, math.nan, accepted, base_rows, "infeasible")
        stat, thr = BaselinePool(base).test(sample, self.n_perm, alpha, self.seed)
        return _result(ident, crit, y, y_star, stat, thr, accepted, base_rows)

    def individual_opportunities(self, y_stars=(0.0, 1.0), baseline="population", group_var=None, match=()):
        """Every individual against the baseline for every y*.

        Each y* is tested at ``alpha / len(y_stars)`` so the per-individual
        verdict (all evaluated y* satisfied) holds at family level ``alpha``.
        Returns the flat result list, individual-major.
        """
        level = self.alpha / len(y_stars)
        for y_star in y_stars:  # fill the shared row lookups before fanning out
            for i in self._baseline_representatives(baseline, group_var, match):
                self.baseline_rows(baseline, i, y_star, group_var, match)

        def work(i):
            return [self.individual_opportunity(i, ys, baseline, group_var, match, alpha=level) for ys in y_stars]

        return [r for rs in self._map(work, range(len(self.table.ids))) for r in rs]

    def _baseline_representatives(self, baseline, group_var, match):
        fact = self.table.factual
        if baseline == "population":
            cols = []
        elif baseline == "recourse":
            cols = [self.y]
        elif baseline == "other-group":
            cols = [fact[group_var]] if group_var else []
        else:
            cols = [fact[m] for m in match]
        if not cols:
            return [0] if len(self.table.ids) else []
        _, first = np.unique(np.column_stack(cols), axis=0, return_index=True)
        return sorted(int(f) for f in first)

    def effort(self, i, y_star):
        """Individual effort toward y* and the accepted row count; +inf when infeasible."""
        sample, accepted = self.individual_sample(i, y_star)
        if accepted < self.min_rows:
            return INFEASIBLE, accepted
        return point_cost(self.s_fact[i], sample), accepted

    def efforts(self, flip=True, y_stars=(0.0, 1.0)):
        """Per-individual effort results; with ``flip`` only toward the opposite outcome."""

        def work(i):
            y = float(self.y[i])
            targets = [1.0 - y] if flip else list(y_stars)
            out = []
            for ys in targets:
                cost, accepted = self.effort(i, ys)
                status = "infeasible" if math.isinf(cost) else "ok"
                thr = math.nan if status == "infeasible" else math.inf
                out.append(_result(int(self.table.ids[i]), "effort", y, ys, cost, thr, accepted, status=status))
            return out

        return [r for rs in self._map(work, range(len(self.table.ids))) for r in rs]

    def _gce_parts(self, g: GroupSpec, y):
        members = np.flatnonzero(g.individuals(self.table) & (self.y == y))
        return members

    def _gce_samples(self, members, y_star, tag):
        realized = self.s_fact[members]
        rows = np.concatenate([np.arange(self._starts[i], self._starts[i + 1]) for i in members]) if len(members) else np.empty(0, int)
        rows = rows[self.y_star[rows] == y_star]
        return self._cap(realized, "gce-real", tag), self._cap(self.s_star[rows], "gce-cf", tag), len(members), len(rows)

    def gce(self, g: GroupSpec, y, y_star):
        """Group effort with its realized and counterfactual sample sizes."""
        members = self._gce_parts(g, y)
        if len(members) == 0:
            raise ValueError(f"group {g} has no members with {self.outcome}={_fmt(y)}")
        tag = f"{g}|{_fmt(y)}|{_fmt(y_star)}"
        real, cfs, n_real, n_cf = self._gce_samples(members, y_star, tag)
        if n_cf == 0:
            raise InsufficientRowsError(0, 1, f"GCE({g}) counterfactual side")
        return energy_mmd(real, cfs), n_real, n_cf

    def group_effort_equality(self, g, h, y, y_star, n_boot=200, boot_cap=500):
        """|GCE(g) - GCE(h)| against a basic-bootstrap band over resampled members."""
        swapped = str(g) > str(h)
        if swapped:  # the band's random stream must not depend on argument order
            g, h = h, g
        d_g, n_g, c_g = self.gce(g, y, y_star)
        d_h, n_h, c_h = self.gce(h, y, y_star)
        diff = d_g - d_h
        if g == h:
            return _result(f"{g}|{h}", "effort-equality", y, y_star, 0.0, 0.0, c_g, c_h)
        mg, mh = self._gce_parts(g, y), self._gce_parts(h, y)
        rng = _rng.stream(self.seed, "bootstrap", f"{g}|{h}|{_fmt(y)}|{_fmt(y_star)}")
        boots = np.empty(n_boot)
        for b in range(n_boot):
            parts = []
            for members in (mg, mh):
                pick = members[rng.integers(0, len(members), len(members))]
                real = self.s_fact[pick]
                rows = np.concatenate([np.arange(self._starts[i], self._starts[i + 1]) for i in pick])
                rows = rows[self.y_star[rows] == y_star]
                if len(rows) == 0:
                    parts.append(math.nan)
                    continue
                real = _rng.subsample_rows(real, boot_cap, rng)
                cfs = _rng.subsample_rows(self.s_star[rows], boot_cap, rng)
                parts.append(energy_mmd(real, cfs))
            boots[b] = parts[0] - parts[1]
        boots = boots[np.isfinite(boots)]
        band = float(np.quantile(np.abs(boots - diff), 1.0 - self.alpha, method="higher")) if len(boots) else math.nan
        if swapped:
            g, h, c_g, c_h = h, g, c_h, c_g
        return _result(f"{g}|{h}", "effort-equality", y, y_star, abs(diff), band, c_g, c_h)

    def group_opportunity(self, g: GroupSpec, y_star, extra_y=None):
        """Capped S* sample of group g with Yhat* = y* (and Yhat = y if ``extra_y``)."""
        rows = g.individuals(self.table)[self.pos] & (self.y_star == y_star)
        if extra_y is not None:
            rows &= self.y[self.pos] == extra_y
        sample = self.s_star[rows]
        return self._cap(sample, "group", f"{g}|{_fmt(y_star)}|{extra_y}"), int(rows.sum())

    def group_opportunity_equality(self, g, h, y_star, extra_y=None):
        a, n_a = self.group_opportunity(g, y_star, extra_y)
        b, n_b = self.group_opportunity(h, y_star, extra_y)
        crit = "group-opportunity" if extra_y is None else "group-recourse-opportunity"
        subject = f"{g}|{h}"
        if min(n_a, n_b) < self.min_rows:
            warnings.warn(f"groups {g} / {h} at y*={_fmt(y_star)}: too few rows ({n_a}, {n_b}); skipped")
            return _result(subject, crit, extra_y, y_star, math.nan, math.nan, n_a, n_b, "skipped")
        # canonical orientation keeps the result symmetric in (g, h)
        if (a.shape, a.tobytes()) > (b.shape, b.tobytes()):
            a, b = b, a
        stat, thr = BaselinePool(b).test(a, self.n_perm, self.alpha, self.seed)
        return _result(subject, crit, extra_y, y_star, stat, thr, n_a, n_b)

    def _map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]


def verdicts(results):
    """Per-subject verdict: satisfied iff every non-skipped result is satisfied.

    Subjects whose results were all skipped are left out.
    """
    out = {}
    for r in results:
        if r.status == "skipped":
            continue
        out[r.subject] = out.get(r.subject, True) and r.satisfied
    return out


def pass_rate(results):
    v = verdicts(results)
    return sum(v.values()) / len(v) if v else math.nan


# -- one-shot conveniences ------------------------------------------------------------


def _position(table, ident):
    return table.individual(ident)


def individual_cf_opportunity(table, ident, y_star, S, outcome=OUTCOME, min_rows=50):
    """S* of individual ``ident``'s counterfactual rows with Yhat* = y* (uncapped)."""
    sub = table.take(table.rows_of(ident))
    kept = condition(sub, where(cf(outcome, "==", y_star)), min_rows=min_rows)
    return project(kept, [m + "*" for m in check_opportunity_set(table, S)])


def individual_realized_opportunity(observation, S):
    """The observed values of ``S`` as a vector; ``observation`` maps names to values."""
    missing = [m for m in S if m not in observation]
    if missing:
        raise KeyError(f"observation lacks opportunity member(s): {', '.join(missing)}")
    return np.array([float(np.asarray(observation[m]).reshape(-1)[0]) for m in S])


def group_cf_opportunity(table, g: GroupSpec, y_star, S, outcome=OUTCOME, y=None, min_rows=50):
    members = g.individuals(table)
    if not members.any():
        raise ValueError(f"group {g} is empty")
    rows = members[table.pos]
    if y is not None:
        rows &= table.factual[outcome][table.pos] == y
    sub = table.take(rows)
    if len(sub) == 0:
        raise ValueError(f"group {g} has no rows with {outcome}={_fmt(y)}")
    kept = condition(sub, where(cf(outcome, "==", y_star)), min_rows=min_rows)
    return project(kept, [m + "*" for m in check_opportunity_set(table, S)])


def group_realized_opportunity(table, g: GroupSpec, y, S, outcome=OUTCOME):
    keep = g.individuals(table) & (table.factual[outcome] == y)
    if not keep.any():
        raise ValueError(f"no members of {g} with {outcome}={_fmt(y)}")
    return np.column_stack([table.factual[m][keep] for m in check_opportunity_set(table, S)])


def individual_equality_cf_opportunity(
    table, ident, S, baseline="population", y_star=1.0, group_var=None, match=(), **options
) -> CriterionResult:
    aud = Auditor(table, S, **options)
    return aud.individual_opportunity(_position(table, ident), y_star, baseline, group_var, match)


def group_equality_cf_opportunity(table, S, groups, y_star, y=None, **options):
    """Pairwise results ``{(g, h): CriterionResult}`` over unordered group pairs."""
    groups = list(groups)
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    for g in groups:
        if not g.individuals(table).any():
            raise ValueError(f"group {g} is empty")
    aud = Auditor(table, S, **options)
    out = {}
    for a in range(len(groups)):
        for b in range(a + 1, len(groups)):
            out[(groups[a], groups[b])] = aud.group_opportunity_equality(groups[a], groups[b], y_star, y)
    return out


def individual_effort(table, ident, y_star, S, **options) -> float:
    """Point cost of the realized S to the individual's opportunity for y*; +inf if infeasible."""
    aud = Auditor(table, S, **options)
    return aud.effort(_position(table, ident), y_star)[0]


def group_effort_gce(table, g: GroupSpec, y, y_star, S, **options) -> float:
    return Auditor(table, S, **options).gce(g, y, y_star)[0]


def group_equality_effort(table, groups, y, y_star, S, n_boot=200, **options):
    groups = list(groups)
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    aud = Auditor(table, S, **options)
    out = {}
    for a in range(len(groups)):
        for b in range(a + 1, len(groups)):
            out[(groups[a], groups[b])] = aud.group_effort_equality(groups[a], groups[b], y, y_star, n_boot)
    return out


__all__ = [
    "Auditor",
    "BASELINES",
    "CriterionResult",
    "GroupSpec",
    "INFEASIBLE",
    "check_opportunity_set",
    "group",
    "group_cf_opportunity",
    "group_effort_gce",
    "group_equality_cf_opportunity",
    "group_equality_effort",
    "group_realized_opportunity",
    "individual_cf_opportunity",
    "individual_effort",
    "individual_equality_cf_opportunity",
    "individual_realized_opportunity",
    "parse_group",
    "pass_rate",
    "verdicts",
]
