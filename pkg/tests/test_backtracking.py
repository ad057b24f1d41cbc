import math

import numpy as np
import pytest

from backtrack_audit.backtracking import (
    COUNTERFACTUAL,
    FACTUAL,
    BacktrackingConditional,
    CounterfactualTable,
    InsufficientRowsError,
    Rule,
    cf,
    condition,
    fact,
    factual_table,
    kernel,
    noninformative,
    parse_rule,
    pin,
    project,
    sample_joint,
    verify_table,
    where,
)
from backtrack_audit.divergence import energy_test
from backtrack_audit.scm_core import ModelError, sample_exogenous

from .helpers import example1_table


def test_noninformative_rules(example1):
    cond = noninformative(example1, {"U_X"})
    assert cond.as_dict() == {"U_A": "keep", "U_X": "resample", "U_Yhat": "keep"}
    assert cond.mutable == {"U_X"}
    with pytest.raises(ModelError, match="unknown"):
        noninformative(example1, {"U_Q"})


def test_rule_parsing():
    assert parse_rule("kernel(0.5)") == kernel(0.5)
    assert parse_rule("pin(0)") == pin(0.0)
    assert parse_rule("keep") == Rule("keep")
    with pytest.raises(ModelError):
        parse_rule("jitter")
    with pytest.raises(ModelError, match="bandwidth"):
        kernel(0)


def test_conditional_must_cover_model(example1):
    cond = BacktrackingConditional({"U_A": Rule("keep")})
    with pytest.raises(ModelError, match="no backtracking rule"):
        cond.validate(example1)


def test_half_of_worlds_flip(example1):
    table = example1_table(example1, [(0.0, -0.5)], n_star=10000, seed=4)
    # X* ~ N(0, 1) so P(Yhat* = 1) = 1/2; 3 sigma band is 0.015
    assert abs(table.star["Yhat"].mean() - 0.5) < 0.015


def test_all_keep_is_factual(example1):
    table = example1_table(example1, [(0.0, -0.5), (1.0, 0.3)], n_star=50, mutable=())
    for name in table.names:
        assert np.array_equal(table.star[name], table.column(name, FACTUAL))


def test_full_resample_is_independent(example1):
    table = example1_table(example1, [(0.0, -2.0), (1.0, 2.0)] * 50, n_star=200, mutable=("U_A", "U_X"))
    x, xs = table.column("X", FACTUAL), table.star["X"]
    assert abs(np.corrcoef(x, xs)[0, 1]) < 0.03
    assert abs(xs.mean()) < 0.03


def test_table_invariants(balanced):
    u = sample_exogenous(balanced, 500, seed=11)
    factual = factual_table(balanced, u)
    cond = noninformative(balanced, [n for n in balanced.exogenous if n not in ("U_A", "U_ZA")])
    table = sample_joint(balanced, cond, factual, n_star=1000, seed=2)
    assert len(table) == 500000
    assert np.array_equal(np.bincount(table.pos), np.full(500, 1000))
    verify_table(balanced, table)
    for name in ("U_A", "U_ZA", "A", "Z_A"):
        assert np.array_equal(table.star[name], table.column(name, FACTUAL))
    assert table.meta["n"] == 500 and table.meta["n_star"] == 1000 and table.meta["seed"] == 2


def test_strata_match_fresh_forward_draws(balanced):
    """V* of an individual equals a fresh simulation with its (A, Z_A) held fixed."""
    u = sample_exogenous(balanced, 4, seed=12)
    factual = factual_table(balanced, u)
    cond = noninformative(balanced, [n for n in balanced.exogenous if n not in ("U_A", "U_ZA")])
    table = sample_joint(balanced, cond, factual, n_star=800, seed=8)
    rng = np.random.default_rng(2024)
    for i in range(4):
        m = 800
        a, za = factual["A"][i], factual["Z_A"][i]
        zap = rng.standard_normal(m)
        x1 = zap + rng.standard_normal(m)
        x2 = 3 * zap + rng.standard_normal(m)
        y = x1 + x2 + 2 * za + zap - 1 + rng.standard_normal(m)
        oracle = np.column_stack([zap, x1, x2, y])
        sl = table.rows_of(i)
        ours = np.column_stack([table.star[k][sl] for k in ("Z_Ap", "X1", "X2", "Y")])
        assert np.all(table.star["A"][sl] == a)
        _, _, ok = energy_test(ours, oracle, n_perm=200, alpha=0.01, seed=i)
        assert ok


def test_missing_exogenous(example1):
    cond = noninformative(example1, {"U_X"})
    with pytest.raises(ModelError, match="missing exogenous"):
        sample_joint(example1, cond, {"id": np.arange(2), "U_A": np.zeros(2), "U_X": np.zeros(2)}, 5, 0)


def test_factual_must_agree(example1):
    cond = noninformative(example1, {"U_X"})
    bad = {"id": [0], "U_A": [0.0], "U_X": [1.0], "U_Yhat": [0.0], "X": [5.0]}
    with pytest.raises(ModelError, match="disagrees"):
        sample_joint(example1, cond, bad, 5, 0)


def test_workers_do_not_change_output(balanced):
    u = sample_exogenous(balanced, 30, seed=1)
    cond = noninformative(balanced, balanced.exogenous)
    one = sample_joint(balanced, cond, factual_table(balanced, u), 40, 7, workers=1)
    four = sample_joint(balanced, cond, factual_table(balanced, u), 40, 7, workers=4)
    for k in one.star:
        assert one.star[k].tobytes() == four.star[k].tobytes()


def test_draws_depend_on_id_not_position(example1):
    a = example1_table(example1, [(0.0, -0.5), (1.0, 0.3)], n_star=20)
    u = {"U_A": np.array([1.0]), "U_X": np.array([0.3]), "U_Yhat": np.zeros(1)}
    fact_b = {"id": np.array([1]), **u}
    b = sample_joint(example1, noninformative(example1, {"U_X"}), fact_b, 20, 0)
    assert np.array_equal(b.star["X"], a.star["X"][a.rows_of(1)])


def test_kernel_and_pin_rules(example1):
    u = {"U_A": np.array([0.0]), "U_X": np.array([1.5]), "U_Yhat": np.zeros(1)}
    rules = {"U_A": Rule("keep"), "U_X": kernel(0.5), "U_Yhat": pin(0.0)}
    table = sample_joint(example1, BacktrackingConditional(rules), {"id": [0], **u}, 20000, 3)
    xs = table.star["U_X"]
    assert abs(xs.mean() - 1.5) < 4 * 0.5 / math.sqrt(20000)
    assert abs(xs.std() - 0.5) < 0.01
    assert (table.star["U_Yhat"] == 0).all()


def test_condition_on_counterfactual_outcome(example1):
    table = example1_table(example1, [(0.0, -0.5)], n_star=10000, seed=5)
    kept = condition(table, where(cf("Yhat", "==", 1)))
    assert (kept.star["X"] > 0).all()
    assert kept.meta["accepted"] + kept.meta["rejected"] == len(table)
    assert kept.meta["acceptance_rate"] == pytest.approx(kept.meta["accepted"] / 10000)
    # half-normal mean sqrt(2/pi)
    assert abs(kept.star["X"].mean() - math.sqrt(2 / math.pi)) < 0.02


def test_condition_keeps_order_and_factual_clauses(example1):
    table = example1_table(example1, [(0.0, -0.5), (1.0, 0.3)], n_star=300, seed=1)
    kept = condition(table, where(fact("A", "==", 0)) & where(cf("X", ">", 0.0)), min_rows=10)
    rows = np.flatnonzero((table.column("A", FACTUAL) == 0) & (table.star["X"] > 0))
    assert np.array_equal(kept.star["X"], table.star["X"][rows])
    assert (kept.row_ids() == 0).all()


def test_condition_too_few_rows(example1):
    table = example1_table(example1, [(1.0, 0.3)], n_star=100)
    with pytest.raises(InsufficientRowsError) as info:
        condition(table, where(cf("Yhat", "==", 0)))
    assert info.value.accepted == 0


def test_project_shapes(example1, balanced):
    table = example1_table(example1, [(0.0, -0.5), (1.0, 0.3)], n_star=25)
    assert project(table, ["X*"]).shape == (50, 1)
    both = project(table, [("X", FACTUAL), ("X", COUNTERFACTUAL)])
    assert both.shape == (50, 2)
    for ident in (0, 1):
        assert len(np.unique(both[table.rows_of(ident), 0])) == 1
    u = sample_exogenous(balanced, 3, seed=0)
    t2 = sample_joint(balanced, noninformative(balanced, ["U_X1"]), factual_table(balanced, u), 4, 0)
    assert project(t2, ["X1*", "X2*", "Z_Ap*"]).shape == (12, 3)
    with pytest.raises(KeyError):
        project(table, ["Q*"])
    with pytest.raises(ValueError):
        project(table, [])


def test_csv_round_trip(tmp_path, example1):
    table = example1_table(example1, [(0.0, -0.5), (1.0, 0.3), (0.0, 0.1)], n_star=7, seed=3)
    path = tmp_path / "t.csv"
    table.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["id", "U_A", "U_X", "U_Yhat", "A", "X", "Yhat", "U_A_star", "U_X_star", "U_Yhat_star", "A_star", "X_star", "Yhat_star"]
    back = CounterfactualTable.read_csv(path)
    assert np.array_equal(back.ids, table.ids)
    assert np.array_equal(back.pos, table.pos)
    for k in table.names:
        assert np.array_equal(back.star[k], table.star[k])
        assert np.array_equal(back.factual[k], table.factual[k])
    assert back.meta == table.meta
