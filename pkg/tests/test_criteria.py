import math
import warnings

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from backtrack_audit.backtracking import factual_table, noninformative, sample_joint
from backtrack_audit.criteria import (
    Auditor,
    CriterionResult,
    GroupSpec,
    check_opportunity_set,
    group,
    group_cf_opportunity,
    group_effort_gce,
    group_equality_cf_opportunity,
    group_equality_effort,
    group_realized_opportunity,
    individual_cf_opportunity,
    individual_effort,
    individual_equality_cf_opportunity,
    individual_realized_opportunity,
    parse_group,
    pass_rate,
    verdicts,
)
from backtrack_audit.divergence import energy_test
from backtrack_audit.predictors import Predictor, make_constant, splice
from backtrack_audit.scm_core import sample_exogenous

from .helpers import example1_table, population_people

HALF_NORMAL_MEAN = math.sqrt(2 / math.pi)


def energy_1d(cdf_a, cdf_b):
    """Energy distance 2 * integral (F - G)^2, split at 0 where the test CDFs kink."""
    f = lambda x: (cdf_a(x) - cdf_b(x)) ** 2
    return 2 * (integrate.quad(f, -np.inf, 0)[0] + integrate.quad(f, 0, np.inf)[0])


def neg_half(x):
    return 2 * norm.cdf(x) if x < 0 else 1.0


def pos_half(x):
    return 0.0 if x < 0 else 2 * norm.cdf(x) - 1


@pytest.fixture(scope="module")
def one_person(example1):
    return example1_table(example1, [(0.0, -0.5), (1.0, 0.3), (0.0, 0.8)], n_star=10000, seed=21)


@pytest.fixture(scope="module")
def crowd(example1):
    return example1_table(example1, population_people(200, 3), n_star=1000, seed=5)


def test_individual_opportunity_samples(one_person):
    pos = individual_cf_opportunity(one_person, 0, 1, ["X"])
    assert (pos > 0).all()
    assert abs(pos.mean() - HALF_NORMAL_MEAN) < 0.02
    assert (individual_cf_opportunity(one_person, 0, 0, ["X"]) <= 0).all()
    prior = np.random.default_rng(99).standard_normal((2000, 1))
    full = individual_cf_opportunity(one_person, 1, 1, ["X"])
    assert len(full) == 10000
    assert energy_test(full[:2000], prior, 200, 0.01, 0)[2]


def test_realized_opportunity(balanced):
    assert individual_realized_opportunity({"A": 0, "X": -0.5}, ["X"]).tolist() == [-0.5]
    u = sample_exogenous(balanced, 3, seed=0)
    row = {k: v[1] for k, v in factual_table(balanced, u).items()}
    out = individual_realized_opportunity(row, ["X1", "X2", "Z_Ap"])
    assert out.tolist() == [row["X1"], row["X2"], row["Z_Ap"]]
    with pytest.raises(KeyError, match="Q"):
        individual_realized_opportunity(row, ["Q"])


def test_group_opportunity_shapes(crowd):
    assert (group_cf_opportunity(crowd, group(A=0), 1, ["X"]) > 0).all()
    a1 = group_cf_opportunity(crowd, group(A=1), 1, ["X"])
    prior = np.random.default_rng(7).standard_normal((1000, 1))
    rows = np.random.default_rng(8).choice(len(a1), 1000, replace=False)
    assert energy_test(a1[rows], prior, 200, 0.01, 0)[2]
    with pytest.raises(ValueError, match="empty"):
        group_cf_opportunity(crowd, group(A=5), 1, ["X"])


def test_group_realized_opportunity(crowd):
    assert (group_realized_opportunity(crowd, group(A=0), 1, ["X"]) > 0).all()
    assert (group_realized_opportunity(crowd, group(A=0), 0, ["X"]) <= 0).all()
    a1 = group_realized_opportunity(crowd, group(A=1), 1, ["X"])
    assert energy_test(a1, np.random.default_rng(1).standard_normal((300, 1)), 200, 0.01, 0)[2]
    with pytest.raises(ValueError):
        group_realized_opportunity(crowd, group(A=1), 0, ["X"])


def test_population_union_matches_individuals(crowd):
    everyone = GroupSpec((("U_Yhat", 0.0),))
    pooled = group_cf_opportunity(crowd, everyone, 1, ["X"])
    parts = [individual_cf_opportunity(crowd, int(i), 1, ["X"], min_rows=1) for i in crowd.ids]
    assert np.array_equal(np.sort(pooled.ravel()), np.sort(np.concatenate(parts).ravel()))


def test_def7_majority_member_differs_from_population(crowd):
    ident = int(crowd.ids[crowd.factual["A"] == 1][0])
    res = individual_equality_cf_opportunity(crowd, ident, ["X"], "population", 1.0, mmd_cap=1000)
    assert res.statistic > res.threshold and not res.satisfied
    assert res.criterion == "opportunity:population"


def test_def7_constant_predictor_all_mutable(balanced):
    model = splice(balanced, make_constant(1.0))
    u = sample_exogenous(model, 100, seed=4)
    table = sample_joint(model, noninformative(model, model.exogenous), factual_table(model, u), 300, 1)
    results = Auditor(table, ["X1", "X2", "Z_Ap"], mmd_cap=300, seed=2).individual_opportunities((1.0,))
    assert pass_rate(results) >= 0.95


def test_def7_mutable_only_predictor(balanced):
    pred = Predictor("ols", ("X1", "X2"), (1.0, 1.0), 0.0, ("threshold", 0.0))
    model = splice(balanced, pred)
    u = sample_exogenous(model, 200, seed=6)
    mutable = [n for n in model.exogenous if n not in ("U_A", "U_ZA")]
    table = sample_joint(model, noninformative(model, mutable), factual_table(model, u), 1000, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = Auditor(table, ["X1", "X2", "Z_Ap"], mmd_cap=300, seed=3).individual_opportunities()
    assert pass_rate(results) >= 0.90


def test_def8_groups(crowd):
    out = group_equality_cf_opportunity(crowd, ["X"], [group(A=0), group(A=1)], 1, mmd_cap=1000)
    res = out[(group(A=0), group(A=1))]
    assert res.statistic > res.threshold
    rev = group_equality_cf_opportunity(crowd, ["X"], [group(A=1), group(A=0)], 1, mmd_cap=1000)
    back = rev[(group(A=1), group(A=0))]
    assert (back.statistic, back.threshold) == (res.statistic, res.threshold)
    same = Auditor(crowd, ["X"]).group_opportunity_equality(group(A=0), group(A=0), 1)
    assert same.statistic == 0.0 and same.satisfied


def test_effort_values(one_person):
    assert individual_effort(one_person, 1, 0, ["X"]) == math.inf
    far = individual_effort(one_person, 0, 1, ["X"], mmd_cap=None)
    # 2 E|s - T| - E|T - T'| for T half-normal
    oracle = 2 * (0.5 + HALF_NORMAL_MEAN) - 2 / math.sqrt(math.pi) * (2 - math.sqrt(2))
    assert far == pytest.approx(oracle, abs=0.02)
    near = individual_effort(one_person, 2, 1, ["X"], mmd_cap=None)
    assert near < far


def test_effort_zero_at_sole_support(example1):
    table = example1_table(example1, [(0.0, 0.4)], n_star=60, mutable=())
    assert individual_effort(table, 0, 1, ["X"]) == 0.0


def test_effort_results_mark_infeasible(one_person):
    results = Auditor(one_person, ["X"], mmd_cap=500).efforts()
    by_id = {r.subject: r for r in results}
    assert by_id["1"].status == "infeasible" and not by_id["1"].satisfied
    assert by_id["0"].status == "ok" and by_id["0"].y_star == 1.0


@pytest.fixture(scope="module")
def big_crowd(example1):
    return example1_table(example1, population_people(4000, 11), n_star=20, seed=9)


def test_gce_matches_integral(big_crowd):
    value = group_effort_gce(big_crowd, group(A=0), 0, 1, ["X"], mmd_cap=3000)
    assert value == pytest.approx(energy_1d(neg_half, pos_half), abs=0.05)
    same = group_effort_gce(big_crowd, group(A=1), 1, 1, ["X"], mmd_cap=3000)
    assert same < 0.01


def test_gce_errors(big_crowd):
    aud = Auditor(big_crowd, ["X"])
    with pytest.raises(ValueError, match="no members"):
        aud.gce(group(A=1), 0, 1)


def test_def11(example1):
    table = example1_table(example1, population_people(1500, 12), n_star=20, seed=2, mutable=("U_A", "U_X"))
    groups = [group(A=0), group(A=1)]
    res = group_equality_effort(table, groups, 1, 0, ["X"], n_boot=100, mmd_cap=1000)[tuple(groups)]
    # GCE(A=0): positive vs negative half-normal; GCE(A=1): N(0,1) vs negative half-normal
    gap = energy_1d(pos_half, neg_half) - energy_1d(norm.cdf, neg_half)
    assert res.statistic == pytest.approx(gap, abs=0.15)
    assert not res.satisfied
    rev = group_equality_effort(table, groups[::-1], 1, 0, ["X"], n_boot=100, mmd_cap=1000)[tuple(groups[::-1])]
    assert (rev.statistic, rev.threshold) == (res.statistic, res.threshold)
    self_cmp = Auditor(table, ["X"]).group_effort_equality(group(A=0), group(A=0), 1, 0)
    assert self_cmp.statistic == 0.0 and self_cmp.satisfied


def test_result_invariant_and_verdicts():
    with pytest.raises(ValueError):
        CriterionResult("1", "x", 0.0, 1.0, 2.0, 1.0, True, 10)
    rs = [
        CriterionResult("1", "x", 0.0, 0.0, 0.1, 1.0, True, 10),
        CriterionResult("1", "x", 0.0, 1.0, 2.0, 1.0, False, 10),
        CriterionResult("2", "x", 0.0, 0.0, 0.1, 1.0, True, 10),
        CriterionResult("3", "x", 0.0, 0.0, math.nan, math.nan, False, 10, status="skipped"),
    ]
    assert verdicts(rs) == {"1": False, "2": True}
    assert pass_rate(rs) == 0.5


def test_groups_and_sets(example1, one_person):
    assert parse_group("R=1, X=0") == GroupSpec((("R", 1.0), ("X", 0.0)))
    assert str(group(A=0)) == "A=0"
    with pytest.raises(ValueError):
        parse_group("A")
    with pytest.raises(KeyError):
        check_opportunity_set(one_person, ["Q"])
    with pytest.warns(UserWarning, match="held fixed"):
        check_opportunity_set(example1, ["U_A"], noninformative(example1, {"U_X"}))
