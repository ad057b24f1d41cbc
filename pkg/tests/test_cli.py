import csv
import json
from collections import Counter

import pytest

from backtrack_audit.audit import ConfigError, normalize_config, read_summary, run_audit
from backtrack_audit.cli import main
from backtrack_audit.scenarios import synthetic_law_school, write_law_school_csv

SMALL = {"n": 40, "n_star": 200, "mmd_cap": 200, "min_rows": 10, "n_perm": 100}


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_config(tmp_path, **cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_generate_scenario(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--scenario", "balanced", "--n", "500", "--seed", "42", "--out", str(out)]) == 0
    data = rows(out / "factual.csv")
    assert len(data) == 500
    assert {"id", "U_A", "U_ZA", "A", "Z_A", "X1", "X2", "Y"} <= set(data[0])
    assert "endo Y" in (out / "model.txt").read_text()
    assert json.loads((out / "factual.meta.json").read_text())["rows"] == 500
    assert "wrote 500 rows" in capsys.readouterr().out


def test_generate_example1_and_law(tmp_path):
    assert main(["generate", "--scenario", "example1", "--n", "1000", "--out", str(tmp_path / "e")]) == 0
    assert len(rows(tmp_path / "e" / "factual.csv")) == 1000
    csv_path = tmp_path / "law.csv"
    write_law_school_csv(synthetic_law_school(300, 1), csv_path)
    assert main(["generate", "--data", str(csv_path), "--out", str(tmp_path / "l")]) == 0
    assert {"U_L", "U_G", "FYA"} <= set(rows(tmp_path / "l" / "factual.csv")[0])


def test_generate_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--n", "5"])
    assert info.value.code == 2
    assert "exactly one of --scenario or --data" in capsys.readouterr().err


def test_generate_bad_data_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("race,sex,lsat,ugpa,zfya\nWhite,1,x,3,0\n")
    assert main(["generate", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "error [scenarios]: line 2" in capsys.readouterr().err


def test_audit_row_count_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path, seed=1, scenarios=["balanced", "unbalanced"], **SMALL)
    out = tmp_path / "rep"
    assert main(["audit", cfg, "--out", str(out)]) == 0
    ind = rows(out / "individual.csv")
    per = Counter(r["scenario"] for r in ind)
    assert per == {"balanced": 40 * 7 * 2, "unbalanced": 40 * 7 * 2}
    keys = Counter((r["scenario"], r["predictor"], r["subject"], r["y_star"]) for r in ind)
    assert set(keys.values()) == {1}
    for r in ind:
        assert r["accepted_rows"] != "" and r["threshold"] != ""
    assert {"plot_individual.csv", "plot_group_effort.csv", "summary.json", "group.csv"} <= {p.name for p in out.iterdir()}
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split()[:4] == ["scenario", "criterion", "opportunity_set", "predictor"]
    assert "VIOLATED" in text and "X1+X2" in text


def test_repetitions_give_one_gce_per_run(tmp_path):
    cfg = write_config(tmp_path, seed=3, scenarios=["balanced"], repetitions=10, criteria=["gce"], **SMALL)
    out = tmp_path / "gce"
    assert main(["audit", cfg, "--out", str(out)]) == 0
    grp = rows(out / "group.csv")
    counts = Counter((r["scenario"], r["predictor"], r["subject"], r["y"], r["y_star"]) for r in grp)
    assert set(counts.values()) == {10}
    assert {r["run"] for r in grp} == {str(i) for i in range(10)}


def test_unknown_variable_fails_before_sampling(tmp_path, capsys):
    cfg = write_config(tmp_path, seed=0, scenarios=["balanced"], opportunity_sets={"S": ["X1", "Q9"]})
    assert main(["audit", cfg, "--out", str(tmp_path / "never")]) == 2
    assert "Q9" in capsys.readouterr().err
    assert not (tmp_path / "never").exists()
    with pytest.raises(ConfigError, match="seed"):
        normalize_config({"scenarios": ["balanced"]})
    with pytest.raises(ConfigError, match="exactly one"):
        normalize_config({"seed": 1})


def test_report_errors(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nowhere")]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 2
    assert "missing report" in capsys.readouterr().err
    (empty / "summary.json").write_text("{not json")
    assert main(["report", str(empty)]) == 2
    err = capsys.readouterr().err
    assert "corrupt JSON" in err and str(empty / "summary.json") in err


def test_config_echo_round_trip(tmp_path):
    raw = {"seed": 5, "scenarios": "balanced", "opportunity_sets": [["X1", "X2"]], "predictors": [{"kind": "ols", "covariates": ["X1"]}], **SMALL}
    cfg = normalize_config(raw)
    _, _, summary = run_audit(cfg)
    echoed = json.loads(json.dumps(summary["config"]))
    assert normalize_config(echoed) == echoed == cfg


def test_audit_is_reproducible(tmp_path):
    cfg = write_config(tmp_path, seed=2, scenarios=["unbalanced"], criteria=["opportunity", "effort", "gce"], **SMALL)
    for name in ("a", "b"):
        assert main(["audit", cfg, "--out", str(tmp_path / name)]) == 0
    for f in ("individual.csv", "group.csv", "plot_individual.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert read_summary(tmp_path / "a")["config"]["seed"] == 2
