import io
import json
import subprocess
import sys

import pytest

from matchcohort import ingest_pairs, tabulate_all
from matchcohort.cli import SEED_ENV, main


def run(*argv, env=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def rows(tsv):
    lines = tsv.strip().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


@pytest.fixture(scope="module")
def twin_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "pairs.csv"
    code, _, err = run("simulate", "--model", "twin", "--phi", "4", "--psi-c", "0", "--pairs", "2000",
                       "--seed", "7", "--out", str(path))
    assert code == 0, err
    return path


# ---------------------------------------------------------------- analyze


def test_analyze_clr_counts():
    code, out, err = run("analyze", "--method", "clr", "--counts", "t=0,u=4,v=2,w=0")
    assert code == 0, err
    (r,) = rows(out)
    assert r["method"] == "clr" and r["estimand"] == "psi_c"
    assert float(r["estimate"]) == pytest.approx(0.6931, abs=5e-5)
    assert float(r["se"]) == pytest.approx(0.8660, abs=5e-5)


def test_analyze_all_on_mixed_cohort(twin_csv):
    code, out, err = run("analyze", "--method", "all", "--input", str(twin_csv))
    assert code == 0, err
    got = rows(out)
    assert len(got) == 6
    assert [r["method"] for r in got] == ["clr", "mixed_discordant", "crude_discordant", "crude_all",
                                          "within_between_saturated", "mixed_all_wb"]


def test_analyze_json(twin_csv):
    code, out, _ = run("analyze", "--method", "clr,crude_all", "--input", str(twin_csv), "--discordant-only", "--json")
    assert code == 0
    doc = json.loads(out)
    assert [d["method"] for d in doc] == ["clr", "crude_all"]
    assert "diagnostics" in doc[0]


def test_analyze_concordant_pair_is_data_error(twin_csv):
    code, out, err = run("analyze", "--method", "crude-discordant", "--input", str(twin_csv))
    assert code == 2
    assert out == ""
    assert err.startswith("E:2:ConcordantPairError:")
    assert err.count("\n") == 1
    cohort = ingest_pairs(twin_csv)
    first = cohort.pair_ids[int((~cohort.discordant).nonzero()[0][0])]
    assert first in err


def test_analyze_explicit_with_covariates(tmp_path):
    path = tmp_path / "cov.csv"
    assert run("simulate", "--model", "covariate", "--pairs", "500", "--seed", "3", "--out", str(path))[0] == 0
    code, out, err = run("analyze", "--method", "explicit", "--input", str(path), "--covariates", "V,W",
                         "--interactions", "V:W")
    assert code == 0, err
    (r,) = rows(out)
    assert "V:W=" in r["nuisance"]


def test_analyze_naive_requires_flag(twin_csv):
    code, _, err = run("analyze", "--method", "mixed-all-naive", "--input", str(twin_csv))
    assert code == 1 and err.startswith("E:1:")
    code, out, _ = run("analyze", "--method", "mixed-all-naive", "--demo-naive-bias", "--input", str(twin_csv))
    assert code == 0 and rows(out)[0]["method"] == "mixed_all_naive"


def test_analyze_degenerate_table_is_numerical_error():
    code, _, err = run("analyze", "--method", "clr", "--counts", "t=1,u=5,v=0,w=3")
    assert code == 3
    assert err.startswith("E:3:DegenerateTableError:")


def test_analyze_continuity():
    code, out, _ = run("analyze", "--method", "clr", "--counts", "t=1,u=5,v=0,w=3", "--continuity")
    assert code == 0
    assert float(rows(out)[0]["estimate"]) > 0


@pytest.mark.parametrize("argv,code", [
    (["analyze", "--method", "clr"], 1),
    (["analyze", "--method", "nope", "--counts", "u=1,v=1"], 1),
    (["analyze", "--counts", "u=1,v=1", "--bogus"], 1),
    (["frobnicate"], 1),
    (["analyze", "--input", "/nonexistent/file.csv"], 2),
    (["analyze", "--counts", "u=x"], 2),
])
def test_error_exit_codes(argv, code):
    got, out, err = run(*argv)
    assert got == code
    assert err.startswith(f"E:{code}:")
    assert err.count("\n") == 1


def test_malformed_input_file(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("pair_id,member,exposure,outcome\na,1,1,1\na,2,7,0\n")
    code, _, err = run("analyze", "--input", str(p))
    assert code == 2 and "line 3" in err


# ---------------------------------------------------------------- simulate


def test_simulate_twin_sidecar(tmp_path):
    out = tmp_path / "t.csv"
    code, _, _ = run("simulate", "--model", "twin", "--phi", "4", "--psi-c", "0", "--pairs", "2000",
                     "--seed", "7", "--out", str(out))
    assert code == 0
    assert len(out.read_text().splitlines()) == 4001
    side = json.loads((tmp_path / "t.csv.json").read_text())
    assert side["oracle"]["psi_m"] == pytest.approx(1.28, abs=0.005)
    assert side["parameters"]["seed"] == 7


def test_simulate_discordant_outcome_sidecar(tmp_path):
    out, side = tmp_path / "d.csv", tmp_path / "side.json"
    code, _, _ = run("simulate", "--model", "discordant-outcome", "--p", "0.3", "--q", "0.1", "--c", "4",
                     "--pairs", "100", "--out", str(out), "--sidecar", str(side))
    assert code == 0
    oracle = json.loads(side.read_text())["oracle"]
    assert round(oracle["clr_limit"], 4) == 1.3499
    assert round(oracle["true_psi"], 4) == 0.9704
    assert tabulate_all(ingest_pairs(out)).qd_hat == 1.0


def test_simulate_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("phi = 10\npsi_c = 0.2\npairs = 50\n")
    code, out, err = run("simulate", "--model", "twin", "--config", str(cfg), "--seed", "1")
    assert code == 0, err
    assert len(out.splitlines()) == 101
    cfg.write_text('{"p": 0.3, "q": 0.1, "c": 2, "n_pairs": 10}')
    assert run("simulate", "--model", "discordant-outcome", "--config", str(cfg))[0] == 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--model", "twin", "--phi", "0"],
    ["simulate", "--model", "twin", "--pairs", "0"],
    ["simulate", "--model", "discordant-outcome", "--p", "0.3"],
    ["simulate", "--model", "twin", "--p", "0.3"],
    ["simulate", "--model", "covariate", "--alpha", "1,2"],
])
def test_simulate_invalid_parameters(argv):
    code, _, err = run(*argv)
    assert code == 1
    assert err.startswith("E:1:")


def test_simulate_byte_identical_and_env_seed(monkeypatch):
    a = run("simulate", "--model", "twin", "--pairs", "30", "--seed", "5")[1]
    b = run("simulate", "--model", "twin", "--pairs", "30", "--seed", "5")[1]
    assert a == b
    monkeypatch.setenv(SEED_ENV, "5")
    assert run("simulate", "--model", "twin", "--pairs", "30")[1] == a
    monkeypatch.setenv(SEED_ENV, "6")
    assert run("simulate", "--model", "twin", "--pairs", "30")[1] != a
    monkeypatch.setenv(SEED_ENV, "abc")
    assert run("simulate", "--model", "twin", "--pairs", "30")[0] == 1


# ---------------------------------------------------------------- reproduce


def test_reproduce_table2_small(tmp_path):
    code, out, err = run("reproduce", "table2", "--reps", "3", "--pairs", "300", "--seed", "1", "--out", str(tmp_path))
    assert code == 0, err
    assert (tmp_path / "table2.tsv").read_text() == out
    json.loads((tmp_path / "table2.json").read_text())
    assert len(rows(out)) == 6
    assert "warning:" in err


def test_reproduce_single_replicate_degenerate(tmp_path):
    code, out, err = run("reproduce", "table2", "--reps", "1", "--pairs", "300", "--out", str(tmp_path))
    assert code == 0
    assert "undefined" in err
    assert all(r["pass_theoretical_se"] == "na" for r in rows(out))


def test_reproduce_byte_identical_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--reps", "4", "--pairs", "300", "--seed", "2", "--grid", "0,0.3"]
    assert run("reproduce", "fig_power_psi", *common, "--out", str(a))[0] == 0
    assert run("reproduce", "fig_power_psi", *common, "--threads", "2", "--out", str(b))[0] == 0
    for name in ("fig_power_psi.csv", "fig_power_psi.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_reproduce_level_annotations(tmp_path):
    code, out, _ = run("reproduce", "fig_level_phi", "--reps", "3", "--pairs", "300", "--grid", "4",
                       "--out", str(tmp_path), "--json")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["level_in_band"]) == 1 and len(doc["level_in_band"][0]) == 5


def test_reproduce_sensitivity_small(tmp_path):
    code, out, err = run("reproduce", "sensitivity", "--reps", "2", "--pairs", "300", "--out", str(tmp_path))
    assert code == 0, err
    assert out.count("# ") == 4


def test_reproduce_bad_target():
    assert run("reproduce", "table9")[0] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "matchcohort", "analyze", "--method", "clr",
                           "--counts", "u=10,v=10"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert rows(proc.stdout)[0]["estimate"] == "0"
