"""Probabilistic structural causal models.

A model is a set of endogenous variables, each computed by a mechanism from
its parents and at most one exogenous term, plus a prior over the exogenous
variables.  Everything is columnar: an assignment maps variable names to
scalars or to equal-length arrays, and booleans are encoded as 0.0/1.0.
"""

from __future__ import annotations

import heapq
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
from scipy.special import expit

from . import _rng

Value = Union[float, np.ndarray]
Assignment = Mapping[str, Value]

EXO_CHUNK = 4096


class ModelError(ValueError):
    """Malformed model description or an invalid request against a model."""


class CycleError(ModelError):
    pass


class AbductionError(ModelError):
    """The exogenous values cannot be recovered from the observation alone."""


# -- building blocks ---------------------------------------------------------


@dataclass(frozen=True)
class Index:
    """Linear index ``sum(w * parent) + intercept``."""

    terms: tuple = ()
    intercept: float = 0.0

    @property
    def names(self):
        return tuple(name for name, _ in self.terms)

    def evaluate(self, env):
        out = self.intercept
        for name, w in self.terms:
            out = out + w * np.asarray(env[name], dtype=float)
        return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class Linear:
    target: str
    index: Index
    exo: str
    form = "linear"

    @property
    def parents(self):
        return self.index.names + (self.exo,)

    def evaluate(self, env):
        return self.index.evaluate(env) + env[self.exo]

    def invert(self, value, env):
        return np.asarray(value, dtype=float) - self.index.evaluate(env)


@dataclass(frozen=True)
class BernExpit:
    """Bernoulli draw with logistic link: ``1[U < expit(index)]``, U ~ uniform(0, 1)."""

    target: str
    index: Index
    exo: str
    form = "bernexpit"

    @property
    def parents(self):
        return self.index.names + (self.exo,)

    def evaluate(self, env):
        return (np.asarray(env[self.exo]) < expit(self.index.evaluate(env))).astype(float)

    def probability(self, env):
        return expit(self.index.evaluate(env))


@dataclass(frozen=True)
class Threshold:
    """``1[index + U > cutoff]``; the exogenous slot is optional."""

    target: str
    index: Index
    cutoff: float
    exo: str | None = None
    form = "gt"

    @property
    def parents(self):
        return self.index.names + ((self.exo,) if self.exo else ())

    def evaluate(self, env):
        score = self.index.evaluate(env)
        if self.exo:
            score = score + env[self.exo]
        return (score > self.cutoff).astype(float)


@dataclass(frozen=True)
class Or:
    """Disjunction of binarized terms; each term is ``(Index, cutoff)``.

    A bare parent ``p`` is the term ``p > 0.5``.  The optional exogenous slot
    acts as one more disjunct (``U > 0.5``).
    """

    target: str
    terms: tuple
    exo: str | None = None
    form = "or"

    @property
    def parents(self):
        names = []
        for index, _ in self.terms:
            names.extend(index.names)
        if self.exo:
            names.append(self.exo)
        return tuple(dict.fromkeys(names))

    def evaluate(self, env):
        out = None
        for index, cutoff in self.terms:
            hit = index.evaluate(env) > cutoff
            out = hit if out is None else (out | hit)
        if self.exo:
            out = out | (np.asarray(env[self.exo]) > 0.5)
        return np.asarray(out).astype(float)


@dataclass(frozen=True)
class Constant:
    target: str
    value: float
    form = "constant"
    exo = None
    parents = ()

    def evaluate(self, env):
        return np.asarray(self.value, dtype=float)


@dataclass(frozen=True)
class Normal:
    """Gaussian noise; the mean may reference endogenous variables (dependence only)."""

    variable: str
    mean: Index
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ModelError(f"{self.variable}: normal stddev must be > 0, got {self.sd}")

    @property
    def parents(self):
        return self.mean.names

    def draw(self, z, u, env):
        return self.mean.evaluate(env) + self.sd * z


@dataclass(frozen=True)
class Bernoulli:
    variable: str
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ModelError(f"{self.variable}: bernoulli p must lie in [0, 1], got {self.p}")

    parents = ()

    def draw(self, z, u, env):
        return (u < self.p).astype(float)


@dataclass(frozen=True)
class Point:
    variable: str
    value: float = 0.0
    parents = ()

    def draw(self, z, u, env):
        return np.full(np.shape(z), self.value, dtype=float)


@dataclass(frozen=True)
class Uniform:
    variable: str
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.high > self.low:
            raise ModelError(f"{self.variable}: uniform needs high > low")

    parents = ()

    def draw(self, z, u, env):
        return self.low + (self.high - self.low) * u


MECHANISMS = (Linear, BernExpit, Threshold, Or, Constant)
NOISES = (Normal, Bernoulli, Point, Uniform)


# -- the model ---------------------------------------------------------------


@dataclass(frozen=True)
class CausalModel:
    exogenous: tuple
    endogenous: tuple
    mechanisms: Mapping[str, object]
    noise: Mapping[str, object]
    order: tuple
    schedule: tuple = field(repr=False)
    declared: tuple = field(repr=False, default=())

    @property
    def variables(self):
        return self.exogenous + self.endogenous

    def kind(self, name):
        if name in self.noise:
            return "exogenous"
        if name in self.mechanisms:
            return "endogenous"
        raise ModelError(f"unknown variable {name!r}")

    @property
    def dependence_only(self):
        """Endogenous variables referenced by a noise mean rather than by a mechanism edge."""
        names = []
        for spec in self.noise.values():
            names.extend(spec.parents)
        return frozenset(names)

    def consumer(self, exo):
        """The mechanism whose exogenous slot is ``exo`` (None if unused)."""
        for name in self.order:
            if self.mechanisms[name].exo == exo:
                return self.mechanisms[name]
        return None

    def describe(self):
        from .language import dump

        return dump(self)


def build_model(spec) -> CausalModel:
    """Validate declarations and compute the topological order.

    ``spec`` is either model-description text or an iterable of mechanism
    and noise objects, in declaration order.
    """
    if isinstance(spec, str):
        from .language import parse

        spec = parse(spec)
    mechanisms, noise, declared = {}, {}, []
    for decl in spec:
        if isinstance(decl, MECHANISMS):
            name, table = decl.target, mechanisms
        elif isinstance(decl, NOISES):
            name, table = decl.variable, noise
        else:
            raise ModelError(f"not a declaration: {decl!r}")
        if name in mechanisms or name in noise:
            what = "mechanism" if table is mechanisms else "noise"
            raise ModelError(f"duplicate {what} for {name!r}")
        table[name] = decl
        declared.append(name)

    for target, mech in mechanisms.items():
        if target in mech.parents:
            raise CycleError(f"cycle detected: {target} is its own parent")
        for parent in mech.parents:
            if parent not in mechanisms and parent not in noise:
                raise ModelError(f"{target}: dangling parent reference {parent!r}")
        if isinstance(mech, (Linear, BernExpit)) and mech.exo not in noise:
            raise ModelError(f"{target}: exogenous term {mech.exo!r} must be declared with exo")
        if getattr(mech, "exo", None) and mech.exo not in noise:
            raise ModelError(f"{target}: exogenous slot {mech.exo!r} is not exogenous")
    for var, spec_ in noise.items():
        for parent in spec_.parents:
            if parent not in mechanisms:
                raise ModelError(f"{var}: noise mean references unknown endogenous {parent!r}")

    parents = {name: tuple(mechanisms[name].parents) for name in mechanisms}
    parents.update({name: tuple(noise[name].parents) for name in noise})
    schedule = _toposort(declared, parents)
    return CausalModel(
        exogenous=tuple(n for n in declared if n in noise),
        endogenous=tuple(n for n in declared if n in mechanisms),
        mechanisms=dict(mechanisms),
        noise=dict(noise),
        order=tuple(n for n in schedule if n in mechanisms),
        schedule=schedule,
        declared=tuple(declared),
    )


def _toposort(declared, parents):
    rank = {name: i for i, name in enumerate(declared)}
    children = {name: [] for name in declared}
    indegree = {name: 0 for name in declared}
    for name, ps in parents.items():
        for p in set(ps):
            children[p].append(name)
            indegree[name] += 1
    ready = [(rank[n], n) for n in declared if indegree[n] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, name = heapq.heappop(ready)
        out.append(name)
        for child in children[name]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, (rank[child], child))
    if len(out) != len(declared):
        stuck = sorted(n for n in declared if indegree[n] > 0)
        raise CycleError(f"cycle detected among {', '.join(stuck)}")
    return tuple(out)


# -- sampling, prediction, abduction, intervention ----------------------------


def _simulate(model, z, u, overrides=None):
    """Walk the schedule drawing exogenous values from raw variates ``z``/``u``.

    ``overrides`` maps exogenous names to fixed columns that replace the prior
    draw (used for keep/pin/kernel backtracking rules).
    """
    env = {}
    col = {name: j for j, name in enumerate(model.exogenous)}
    overrides = overrides or {}
    for name in model.schedule:
        if name in model.noise:
            if name in overrides:
                value = overrides[name]
                env[name] = value(env) if callable(value) else value
            else:
                j = col[name]
                env[name] = model.noise[name].draw(z[:, j], u[:, j], env)
        else:
            env[name] = np.broadcast_to(model.mechanisms[name].evaluate(env), (z.shape[0],)).astype(float)
    return env


def raw_variates(rng, rows, width):
    return rng.standard_normal((rows, width)), rng.random((rows, width))


def sample_exogenous(model: CausalModel, n: int, seed: int, workers=None, with_endogenous=False):
    """Draw ``n`` rows from P(U); chunked so the result ignores ``workers``.

    Returns a dict of length-``n`` arrays over the exogenous variables (plus the
    endogenous ones when ``with_endogenous`` is set, which are needed anyway
    to evaluate dependence-only noise means).
    """
    if n < 1:
        raise ModelError("n must be >= 1")
    width = len(model.exogenous)
    bounds = [(s, min(s + EXO_CHUNK, n)) for s in range(0, n, EXO_CHUNK)]

    def chunk(c):
        lo, hi = bounds[c]
        z, u = raw_variates(_rng.stream(seed, "exogenous", c), hi - lo, width)
        return _simulate(model, z, u)

    workers = workers or thread_count()
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(chunk, range(len(bounds))))
    else:
        parts = [chunk(c) for c in range(len(bounds))]
    names = model.variables if with_endogenous else model.exogenous
    return {name: np.concatenate([p[name] for p in parts]) for name in names}


def thread_count():
    try:
        return max(1, int(os.environ.get("BACKTRACK_AUDIT_THREADS", "1")))
    except ValueError:
        return 1


def forward(model: CausalModel, u: Assignment) -> dict:
    """Endogenous values for exogenous assignment ``u`` (scalars or columns)."""
    missing = [name for name in model.exogenous if name not in u]
    if missing:
        raise ModelError(f"missing exogenous value(s): {', '.join(missing)}")
    scalar = all(np.ndim(u[name]) == 0 for name in model.exogenous)
    env = {name: np.asarray(u[name], dtype=float) for name in model.exogenous}
    shape = np.broadcast_shapes(*(env[n].shape for n in model.exogenous)) if env else ()
    for name in model.order:
        env[name] = np.broadcast_to(model.mechanisms[name].evaluate(env), shape).astype(float)
    out = {name: env[name] for name in model.endogenous}
    if scalar:
        out = {k: float(v) for k, v in out.items()}
    return out


def abduce(model: CausalModel, v: Assignment, recorded: Assignment | None = None) -> dict:
    """Recover the exogenous values that reproduce observation ``v``.

    Point-mass noise is known a priori, linear additive-noise slots are
    inverted, and any other slot must be supplied in ``recorded``.
    """
    recorded = recorded or {}
    missing = [name for name in model.endogenous if name not in v]
    if missing:
        raise ModelError(f"observation lacks endogenous value(s): {', '.join(missing)}")
    env = {name: np.asarray(v[name], dtype=float) for name in model.endogenous}
    out = {}
    for name in model.schedule:
        if name not in model.noise:
            continue
        spec = model.noise[name]
        if name in recorded:
            value = np.asarray(recorded[name], dtype=float)
        elif isinstance(spec, Point):
            value = np.asarray(spec.value, dtype=float)
        else:
            mech = model.consumer(name)
            if not isinstance(mech, Linear):
                form = mech.form if mech is not None else "unused"
                raise AbductionError(
                    f"{name} feeds a non-invertible {form} mechanism; record it alongside the data"
                )
            value = mech.invert(env[mech.target], {**env, **out})
        out[name] = value
        env[name] = value
    check = forward(model, out)
    for name in model.endogenous:
        if not np.allclose(check[name], env[name], rtol=1e-9, atol=1e-9):
            raise AbductionError(f"observation is inconsistent with the model at {name}")
    if all(np.ndim(v[name]) == 0 for name in model.endogenous):
        out = {k: float(x) for k, x in out.items()}
    return out


def intervene(model: CausalModel, fix: Assignment) -> CausalModel:
    """Submodel with the mechanisms of ``fix`` replaced by constants."""
    for name in fix:
        kind = model.kind(name)
        if kind == "exogenous":
            raise ModelError(f"cannot intervene on exogenous {name!r}; use a point-mass noise instead")
        if name in model.dependence_only:
            raise ModelError(f"{name!r} only induces dependence through a noise mean; not an intervention target")
    decls = []
    for name in model.declared:
        if name in model.noise:
            decls.append(model.noise[name])
        elif name in fix:
            decls.append(Constant(name, float(fix[name])))
        else:
            decls.append(model.mechanisms[name])
    return build_model(decls)
