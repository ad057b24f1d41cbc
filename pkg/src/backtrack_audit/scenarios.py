"""Built-in data-generating models and the law-school pipeline.

``example1`` is the hiring rule Yhat = A or (X > 0); ``balanced`` and
``unbalanced`` are the two synthetic hiring scenarios in which latent
age-related circumstance ``Z_A`` either stays out of qualification ``X1`` or
feeds into it.  Law-school data are read from CSV and fitted with a linear
model in which race ``R`` and sex ``X`` drive LSAT ``L``, GPA ``G`` and the
first-year outcome ``Y``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _rng
from .predictors import fit_logistic, fit_ols
from .scm_core import (
    BernExpit,
    Bernoulli,
    Index,
    Linear,
    Normal,
    Uniform,
    abduce,
    build_model,
    sample_exogenous,
)

EXAMPLE1 = """\
# hiring rule: offered if majority group or qualified
exo U_A ~ bernoulli(0.5)
exo U_X ~ normal(0, 1)
exo U_Yhat ~ point(0)
endo A = linear(0) + U_A
endo X = linear(0) + U_X
endo Yhat = or(A, gt(X, 0)) + U_Yhat
"""

_HIRING = """\
exo U_A ~ bernoulli(0.5)
endo A = linear(0) + U_A
# A only induces dependence in Z_A through the noise mean
exo U_ZA ~ normal(0.5*A, 1)
endo Z_A = linear(0) + U_ZA
exo U_ZAp ~ normal(0, 1)
endo Z_Ap = linear(0) + U_ZAp
exo U_X1 ~ normal(0, 1)
endo X1 = linear({x1}) + U_X1
exo U_X2 ~ normal(0, 1)
endo X2 = linear(3*Z_Ap) + U_X2
exo U_Y ~ normal(0, 1)
endo Y = linear(X1 + X2 + 2*Z_A + Z_Ap - {c}) + U_Y
"""

BALANCED = _HIRING.format(x1="Z_Ap", c=1)
UNBALANCED = _HIRING.format(x1="2*Z_A + Z_Ap", c=2)

SCENARIOS = {"example1": EXAMPLE1, "balanced": BALANCED, "unbalanced": UNBALANCED}

# age-related circumstance cannot be changed by the applicant
HIRING_IMMUTABLE = ("U_A", "U_ZA")
HIRING_OPPORTUNITY = ("X1", "X2", "Z_Ap")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n: int
    seed: int

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; choose from {', '.join(SCENARIOS)}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def scenario_model(name):
    return build_model(SCENARIOS[name])


def generate(config: ScenarioConfig):
    """Model plus ``n`` factual rows with the exogenous draws recorded."""
    model = scenario_model(config.name)
    data = sample_exogenous(model, config.n, config.seed, with_endogenous=True)
    factual = {"id": np.arange(config.n, dtype=np.int64)}
    factual.update({name: data[name] for name in model.variables})
    return model, factual


def default_mutable(model):
    return tuple(u for u in model.exogenous if u not in HIRING_IMMUTABLE)


# -- law school ------------------------------------------------------------------


class LawSchoolDataError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


DEFAULT_LAW_MAPPING = {
    "race": "race",
    "sex": "sex",
    "lsat": "lsat",
    "ugpa": "ugpa",
    "outcome": "zfya",
    "majority": ["White"],
    "sex_positive": ["2"],
}


@dataclass(frozen=True)
class LawSchoolRecord:
    race: str
    sex: str
    lsat: float
    ugpa: float
    outcome: float
    r: int  # 1 = majority
    x: int

    def __post_init__(self):
        if not (np.isfinite(self.lsat) and np.isfinite(self.ugpa) and np.isfinite(self.outcome)):
            raise ValueError("lsat, ugpa and outcome must be finite")
        if not self.race or not self.sex:
            raise ValueError("race and sex must be non-empty")


def load_law_school(path, mapping=None, on_error="raise"):
    """Parse and validate a law-school CSV.

    ``mapping`` names the columns (``race``, ``sex``, ``lsat``, ``ugpa``,
    ``outcome``) and lists the race categories counted as majority and the
    sex codes mapped to 1.  Malformed rows raise with their line number, or are
    skipped when ``on_error='skip'``.
    """
    mapping = {**DEFAULT_LAW_MAPPING, **(mapping or {})}
    majority = {str(m) for m in mapping["majority"]}
    positive = {str(s) for s in mapping["sex_positive"]}
    records, skipped = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for role in ("race", "sex", "lsat", "ugpa", "outcome"):
            if mapping[role] not in fields:
                raise LawSchoolDataError(f"missing column {mapping[role]!r} (role {role})", 1)
        for row in reader:
            line = reader.line_num
            try:
                race = row[mapping["race"]].strip()
                sex = row[mapping["sex"]].strip()
                rec = LawSchoolRecord(
                    race=race,
                    sex=sex,
                    lsat=float(row[mapping["lsat"]]),
                    ugpa=float(row[mapping["ugpa"]]),
                    outcome=float(row[mapping["outcome"]]),
                    r=int(race in majority),
                    x=int(sex in positive),
                )
            except (TypeError, ValueError) as exc:
                if on_error == "skip":
                    skipped.append(line)
                    continue
                raise LawSchoolDataError(f"unparseable row: {exc}", line) from None
            records.append(rec)
    return records


def write_law_school_csv(records, path, mapping=None):
    mapping = {**DEFAULT_LAW_MAPPING, **(mapping or {})}
    cols = [mapping[k] for k in ("race", "sex", "lsat", "ugpa", "outcome")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow([r.race, r.sex, repr(r.lsat), repr(r.ugpa), repr(r.outcome)])


def synthetic_law_school(n, seed):
    """Survey-shaped synthetic records (the real LSAC file is not redistributable).

    A shared latent ability drives LSAT, GPA and first-year grade, so the
    residuals of LSAT and GPA given race and sex carry signal about the
    outcome.  Race and sex shift all three linearly.
    """
    rng = _rng.stream(seed, "law-fixture")
    cats = np.array(["White", "Black", "Hispanic", "Asian", "Other"])
    race = rng.choice(cats, size=n, p=[0.8, 0.07, 0.05, 0.05, 0.03])
    male = rng.random(n) < 0.56
    maj = (race == "White").astype(float)
    k = rng.standard_normal(n)
    lsat = 31.5 + 5.5 * maj + 0.7 * male + 3.2 * k + 2.5 * rng.standard_normal(n)
    ugpa = 2.95 + 0.3 * maj - 0.05 * male + 0.22 * k + 0.3 * rng.standard_normal(n)
    zfya = -0.55 + 0.6 * maj + 0.1 * male + 0.65 * k + 0.7 * rng.standard_normal(n)
    return [
        LawSchoolRecord(str(race[i]), "2" if male[i] else "1", float(lsat[i]), float(ugpa[i]), float(zfya[i]), int(maj[i]), int(male[i]))
        for i in range(n)
    ]


def law_columns(records):
    return {
        "R": np.array([r.r for r in records], dtype=float),
        "X": np.array([r.x for r in records], dtype=float),
        "L": np.array([r.lsat for r in records], dtype=float),
        "G": np.array([r.ugpa for r in records], dtype=float),
        "FYA": np.array([r.outcome for r in records], dtype=float),
    }


LAW_ROLES = {"race": "R", "sex": "X", "lsat": "L", "gpa": "G", "outcome": "FYA"}
LAW_IMMUTABLE = ("U_R", "U_S")


def fit_law_school_scm(records, seed=0, min_records=100):
    """Fit the linear law-school model and abduce every individual's exogenous values.

    L and G get OLS fits on (R, X) with normal residual noise; the binarized
    outcome (above the sample median) gets a logistic fit on (R, X).  U_L and
    U_G are the residuals, U_R and U_S the observed roots, and U_Y is drawn
    (seeded) from its posterior given the observed binary outcome.
    """
    if len(records) < min_records:
        raise ValueError(f"need at least {min_records} records, got {len(records)}")
    data = law_columns(records)
    data["Y"] = (data["FYA"] > np.median(data["FYA"])).astype(float)
    fits = {}
    for target in ("L", "G"):
        fits[target] = fit_ols(data, target, ("R", "X"))
    y_pred, y_rep = fit_logistic(data, "Y", ("R", "X"))
    fits["Y"] = (y_pred, y_rep)

    def index(p):
        return Index(tuple(zip(p.covariates, p.weights)), p.intercept)

    decls = [
        Bernoulli("U_R", float(data["R"].mean())),
        Linear("R", Index(), "U_R"),
        Bernoulli("U_S", float(data["X"].mean())),
        Linear("X", Index(), "U_S"),
        Normal("U_L", Index(), float(np.sqrt(fits["L"][1].residual_variance))),
        Linear("L", index(fits["L"][0]), "U_L"),
        Normal("U_G", Index(), float(np.sqrt(fits["G"][1].residual_variance))),
        Linear("G", index(fits["G"][0]), "U_G"),
        Uniform("U_Y", 0.0, 1.0),
        BernExpit("Y", index(y_pred), "U_Y"),
    ]
    model = build_model(decls)

    p = model.mechanisms["Y"].probability(data)
    draw = _rng.stream(seed, "law-abduction").random(len(records))
    u_y = np.where(data["Y"] == 1.0, draw * p, p + draw * (1.0 - p))
    obs = {name: data[name] for name in model.endogenous}
    u = abduce(model, obs, recorded={"U_Y": u_y})
    factual = {"id": np.arange(len(records), dtype=np.int64), **u, **obs, "FYA": data["FYA"]}
    return model, factual, fits


def subsample(records, n, seed):
    """Seeded uniform subsample without replacement, in original order."""
    if n > len(records):
        raise ValueError(f"cannot draw {n} of {len(records)} records")
    idx = np.sort(_rng.stream(seed, "subsample").choice(len(records), size=n, replace=False))
    return [records[i] for i in idx]


def bernexpit_probability(model, name, data):
    return expit(model.mechanisms[name].index.evaluate(data))
