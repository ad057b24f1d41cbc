"""Predictors under audit: fitting, binarization, and installation as a model node."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .scm_core import Bernoulli, CausalModel, Index, Linear, ModelError, Point, Threshold, build_model

KINDS = ("ols", "logistic", "random", "constant")


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class Predictor:
    """Linear score over ``covariates`` plus an optional binarization rule.

    ``binarize`` is ``None`` or ``("threshold", c)``: the prediction is
    ``1[score > c]``.  A ``random`` predictor ignores every covariate and
    draws its output from its own Bernoulli(``p``) exogenous slot.
    """

    kind: str
    covariates: tuple = ()
    weights: tuple = ()
    intercept: float = 0.0
    binarize: tuple | None = None
    p: float = 0.5
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if len(self.weights) != len(self.covariates):
            raise ValueError("weights and covariates differ in length")
        if self.kind == "random" and self.covariates:
            raise ValueError("a random predictor takes no covariates")

    def score(self, data):
        n = _rows(data)
        out = np.full(n, float(self.intercept))
        for name, w in zip(self.covariates, self.weights):
            out = out + w * np.asarray(data[name], dtype=float)
        return out

    def predict(self, data, rng=None):
        if self.kind == "random":
            if rng is None:
                raise ValueError("random predictor needs an rng")
            return (rng.random(_rows(data)) < self.p).astype(float)
        s = self.score(data)
        if self.binarize is None:
            return s
        return binarize(s, self.binarize)

    def with_threshold(self, c):
        return _replace(self, binarize=("threshold", float(c)))

    def to_json(self):
        d = asdict(self)
        d["covariates"] = list(self.covariates)
        d["weights"] = list(self.weights)
        d["binarize"] = list(self.binarize) if self.binarize else None
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["covariates"] = tuple(d["covariates"])
        d["weights"] = tuple(d["weights"])
        d["binarize"] = tuple(d["binarize"]) if d.get("binarize") else None
        return cls(**d)


def _replace(p, **kw):
    return Predictor(**{**asdict(p), **kw})


def _rows(data):
    for v in data.values():
        return len(np.atleast_1d(v))
    return 0


@dataclass
class FitReport:
    n: int
    residual_variance: float
    coefficients: list = field(default_factory=list)  # (name, estimate, standard error)
    converged: bool = True
    iterations: int = 0
    stabilized: bool = False

    def estimate(self, name):
        for row in self.coefficients:
            if row[0] == name:
                return row[1], row[2]
        raise KeyError(name)


def _design(data, covariates):
    n = _rows(data)
    cols = [np.ones(n)] + [np.asarray(data[c], dtype=float) for c in covariates]
    return np.column_stack(cols)


def fit_ols(data, target, covariates, name=""):
    """Least-squares fit of ``target`` on ``covariates`` with an intercept."""
    covariates = tuple(covariates)
    missing = [c for c in (target,) + covariates if c not in data]
    if missing:
        raise FitError(f"columns not in data: {', '.join(missing)}")
    x = _design(data, covariates)
    y = np.asarray(data[target], dtype=float)
    n, p = x.shape
    if n <= p:
        raise FitError(f"need more than {p} rows to fit {p} coefficients, got {n}")
    if np.linalg.matrix_rank(x) < p:
        raise FitError("design matrix is rank deficient")
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    dof = n - p
    sigma2 = float(resid @ resid / dof)
    cov = sigma2 * np.linalg.inv(x.T @ x)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    names = ("(intercept)",) + covariates
    report = FitReport(
        n=n,
        residual_variance=max(sigma2, 0.0),
        coefficients=[(nm, float(b), float(s)) for nm, b, s in zip(names, beta, se)],
    )
    pred = Predictor("ols", covariates, tuple(float(b) for b in beta[1:]), float(beta[0]), name=name)
    return pred, report


def fit_logistic(data, target, covariates, max_iter=100, tol=1e-8, ridge=1e-6, name=""):
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    When the data are separable (or IRLS fails to converge) the fit is redone
    with a small ridge penalty, and the report says so.
    """
    covariates = tuple(covariates)
    x = _design(data, covariates)
    y = np.asarray(data[target], dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise FitError("logistic target must be binary 0/1")
    beta, it, ok = _irls(x, y, max_iter, tol, 0.0)
    stabilized = False
    prob = expit(x @ beta)
    separated = (not ok) or np.all((prob > 1 - 1e-9) | (prob < 1e-9))
    if separated:
        warnings.warn("logistic fit did not converge (separation?); using ridge-stabilized fit")
        beta, it, ok = _irls(x, y, max_iter, tol, ridge)
        stabilized = True
    prob = expit(x @ beta)
    w = prob * (1 - prob)
    info = x.T @ (w[:, None] * x) + (ridge * np.eye(x.shape[1]) if stabilized else 0.0)
    try:
        se = np.sqrt(np.clip(np.diag(np.linalg.inv(info)), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(x.shape[1], np.inf)
    names = ("(intercept)",) + covariates
    report = FitReport(
        n=len(y),
        residual_variance=float(np.mean((y - prob) ** 2)),
        coefficients=[(nm, float(b), float(s)) for nm, b, s in zip(names, beta, se)],
        converged=bool(ok),
        iterations=it,
        stabilized=stabilized,
    )
    pred = Predictor("logistic", covariates, tuple(float(b) for b in beta[1:]), float(beta[0]), name=name)
    return pred, report


def _irls(x, y, max_iter, tol, ridge):
    p = x.shape[1]
    beta = np.zeros(p)
    penalty = ridge * np.eye(p)
    for it in range(1, max_iter + 1):
        eta = x @ beta
        prob = expit(eta)
        w = np.clip(prob * (1 - prob), 1e-12, None)
        grad = x.T @ (y - prob) - ridge * beta
        hess = x.T @ (w[:, None] * x) + penalty
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, it, False
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            return beta, it, True
    return beta, max_iter, False


def make_random(seed=None, p=0.5, name="Random"):
    """Coin-flip predictor; ``seed`` only matters for :meth:`Predictor.predict`."""
    return Predictor("random", p=p, binarize=None, name=name)


def make_constant(value, name="Constant"):
    return Predictor("constant", intercept=float(value), name=name)


def icf_residual_names(roles):
    return (f"U_{roles['lsat']}", f"U_{roles['gpa']}")


def make_icf_fair(data, roles, residual_names=None, name="ICF Fair"):
    """Two-stage predictor that uses only residuals of LSAT and GPA.

    ``roles`` maps ``race``, ``sex``, ``lsat``, ``gpa`` and ``outcome`` to
    column names.  Stage one regresses LSAT and GPA on race and sex; stage two
    regresses the outcome on the two residual columns.  The returned
    predictor's covariates are the residual column names (by default the
    exogenous names ``U_<lsat>``, ``U_<gpa>`` used by the fitted law-school
    model), and the residual columns are returned alongside.
    """
    base = (roles["race"], roles["sex"])
    names = tuple(residual_names or icf_residual_names(roles))
    resid = {}
    reports = {}
    for col, rname in zip((roles["lsat"], roles["gpa"]), names):
        p, rep = fit_ols(data, col, base)
        resid[rname] = np.asarray(data[col], dtype=float) - p.score(data)
        reports[col] = rep
    stage2 = {**resid, roles["outcome"]: np.asarray(data[roles["outcome"]], dtype=float)}
    if all(np.allclose(resid[r], 0.0, atol=1e-10) for r in names):
        value = float(np.mean(stage2[roles["outcome"]]))
        pred = Predictor("ols", names, (0.0, 0.0), value, name=name)
        reports["stage2"] = FitReport(n=_rows(data), residual_variance=float(np.var(stage2[roles["outcome"]])))
        return pred, resid, reports
    pred, rep = fit_ols(stage2, roles["outcome"], names, name=name)
    reports["stage2"] = rep
    return pred, resid, reports


def binarize(scores, rule):
    """0/1 column: ``score > c`` for ``("threshold", c)``; ``"median"`` uses the sample median."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no scores to binarize")
    if rule == "median" or (isinstance(rule, (tuple, list)) and rule[0] == "median"):
        c = float(np.median(scores))
    elif isinstance(rule, (tuple, list)) and rule[0] == "threshold":
        c = float(rule[1])
    else:
        raise ValueError(f"unknown binarization rule {rule!r}")
    return (scores > c).astype(float)


def median_threshold(pred: Predictor, data) -> Predictor:
    """Freeze the sample-median rule into a fixed threshold on ``data``'s scores."""
    return pred.with_threshold(float(np.median(pred.score(data))))


def splice(model: CausalModel, pred: Predictor, as_node="Yhat") -> CausalModel:
    """Copy of ``model`` with ``pred`` installed as the mechanism of ``as_node``.

    Existing mechanisms are untouched; a fresh exogenous slot ``U_<as_node>``
    is added (Bernoulli for a random predictor, a point mass otherwise).
    """
    missing = [c for c in pred.covariates if c not in model.noise and c not in model.mechanisms]
    if missing:
        raise ModelError(f"predictor covariate(s) missing from model: {', '.join(missing)}")
    if as_node in model.noise:
        raise ModelError(f"{as_node!r} is exogenous")
    slot = f"U_{as_node}"
    if slot in model.noise or slot in model.mechanisms:
        raise ModelError(f"slot name {slot!r} already used")
    index = Index(tuple(zip(pred.covariates, (float(w) for w in pred.weights))), float(pred.intercept))
    if pred.kind == "random":
        noise = Bernoulli(slot, pred.p)
        mech = Linear(as_node, Index((), 0.0), slot)
    elif pred.binarize is not None:
        noise = Point(slot, 0.0)
        mech = Threshold(as_node, index, float(pred.binarize[1]), slot)
    else:
        noise = Point(slot, 0.0)
        mech = Linear(as_node, index, slot)
    decls = []
    for name in model.declared:
        if name == as_node:
            continue
        decls.append(model.noise.get(name) or model.mechanisms[name])
    decls += [noise, mech]
    return build_model(decls)


def spliced_predictor(model: CausalModel, as_node="Yhat") -> Predictor:
    """Read back the predictor installed at ``as_node`` (inverse of :func:`splice`)."""
    mech = model.mechanisms[as_node]
    if isinstance(mech, Linear) and isinstance(model.noise.get(mech.exo), Bernoulli) and not mech.index.terms:
        return make_random(p=model.noise[mech.exo].p)
    names = tuple(n for n, _ in mech.index.terms)
    weights = tuple(w for _, w in mech.index.terms)
    binar = ("threshold", mech.cutoff) if isinstance(mech, Threshold) else None
    return Predictor("ols", names, weights, mech.index.intercept, binar)
