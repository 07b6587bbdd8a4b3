import json
import math

import numpy as np
import pytest

from matchcohort import EstimationError, ParameterError
from matchcohort.experiments import (
    McSummary,
    PowerCurve,
    ReplicateSet,
    run_power_curve,
    run_sensitivity_suite,
    run_table2,
    run_wald_agreement,
    simulate_methods,
    summaries_to_tsv,
    summarize,
    to_json_text,
)

pytestmark = pytest.mark.filterwarnings("ignore:only")


def test_simulate_methods_deterministic_and_worker_independent():
    params = {"phi": 4.0, "psi_c": 0.0, "n_pairs": 400}
    methods = ("explicit", "clr", "crude_all", "mixed_all_wb")
    a = simulate_methods("twin", params, methods, 6, seed=3)
    b = simulate_methods("twin", params, methods, 6, seed=3, workers=2)
    assert np.array_equal(a.estimates, b.estimates) and np.array_equal(a.ses, b.ses)
    c = simulate_methods("twin", params, methods, 6, seed=4)
    assert not np.array_equal(a.estimates, c.estimates)


def test_simulate_methods_validation():
    with pytest.raises(ParameterError):
        simulate_methods("twin", {"n_pairs": 10}, ("bogus",), 2)
    with pytest.raises(ParameterError):
        simulate_methods("twin", {"n_pairs": 10}, ("clr",), 0)
    with pytest.raises(ParameterError):
        simulate_methods("nope", {"n_pairs": 10}, ("clr",), 1)


def test_failure_rate_abort():
    est = np.array([[0.1], [np.nan], [0.2]])
    reps = ReplicateSet(("clr",), est, np.ones_like(est), [[""], ["DegenerateTableError"], [""]])
    assert reps.failures("clr") == 1
    with pytest.raises(EstimationError, match="aborting"):
        reps.check_failures()
    ok = ReplicateSet(("clr",), np.zeros((200, 1)), np.ones((200, 1)), [[""]] * 200)
    ok.check_failures()


def test_tiny_samples_trigger_abort():
    # 10 pairs: outcome-discordant cells are often empty
    with pytest.raises(EstimationError):
        run_table2(replicates=20, n_pairs=10, seed=0)


def test_summary_fields():
    est = np.array([[0.1], [-0.1], [0.3], [0.1]])
    se = np.full_like(est, 0.1)
    s = summarize(ReplicateSet(("clr",), est, se, [[""]] * 4), "clr", 0.0, reference_se=0.17)
    assert s.mean_estimate == pytest.approx(0.1)
    assert s.empirical_se == pytest.approx(np.std(est, ddof=1))
    assert s.mc_se_of_mean == pytest.approx(s.empirical_se / 2)
    assert s.rejection_rate == 0.25
    assert 0 <= s.rejection_rate <= 1
    assert s.mean_ok() == (abs(0.1) <= 3 * s.mc_se_of_mean)
    rec = s.to_record()
    assert rec["pass_empirical_se"] == s.empirical_se_ok()


def test_band_overrides_mc_se():
    s = McSummary("clr", "psi_c", 1.35, 1.30, 0.1, 0.1, 1.0, 500, band=0.04)
    assert not s.mean_ok()
    assert McSummary("clr", "psi_c", 1.35, 1.32, 0.1, 0.1, 1.0, 500, band=0.04).mean_ok()


def test_table2_single_replicate_degenerate():
    with pytest.warns(UserWarning, match="undefined"):
        rep = run_table2(replicates=1, n_pairs=500, seed=1)
    for s in rep.summaries:
        assert s.degenerate and math.isnan(s.mc_se_of_mean)
        assert s.to_record()["pass_theoretical_se"] is None
    assert "na" in summaries_to_tsv(rep.summaries)
    json.loads(to_json_text(rep))


def test_table2_small_run_structure():
    rep = run_table2(replicates=8, n_pairs=500, seed=2)
    assert [s.method for s in rep.summaries] == ["explicit", "clr", "mixed_discordant", "crude_discordant",
                                                "crude_all", "mixed_all_wb"]
    assert rep.summary("crude_all").oracle == pytest.approx(1.281763694384558)
    assert rep.summary("crude_all").estimand == "psi_m"
    assert rep.summary("crude_discordant").estimand == "psi_s"
    assert math.isfinite(rep.extras["mean_abs_tc_ts"])
    again = run_table2(replicates=8, n_pairs=500, seed=2)
    assert to_json_text(rep) == to_json_text(again)


def test_power_curve_shapes_and_outputs():
    curve = run_power_curve("psi_c_grid", [0.0, 0.5], replicates=4, n_pairs=400, seed=1)
    assert curve.rates.shape == (2, 5)
    assert np.all((curve.rates >= 0) & (curve.rates <= 1))
    lines = curve.to_csv().strip().splitlines()
    assert lines[0] == "psi_c,method,rejection_rate,mc_se,replicates"
    assert len(lines) == 1 + 2 * 5
    doc = curve.to_json()
    assert doc["grid"] == [0.0, 0.5] and len(doc["exchangeable"]) == 2


def test_power_curve_validation():
    with pytest.raises(ParameterError):
        run_power_curve("theta_grid", [1.0], replicates=2)
    with pytest.raises(ParameterError):
        run_power_curve("phi_grid", [], replicates=2)
    with pytest.raises(ParameterError):
        run_power_curve("phi_grid", [-1.0], replicates=2)


def test_power_curve_exchangeability_arithmetic():
    rates = np.array([[0.05, 0.06, 0.04]])
    pc = PowerCurve("phi", np.array([4.0]), ("a", "b", "c"), rates, np.full((1, 3), 1000))
    pooled = math.sqrt(0.05 * 0.95 / 1000)
    assert pc.pooled_mc_se()[0] == pytest.approx(pooled)
    assert pc.max_pairwise_difference()[0] == pytest.approx(0.02)
    assert bool(pc.exchangeable()[0]) == (0.02 <= 2 * pooled)


def test_sensitivity_suite_structure():
    suite = run_sensitivity_suite(replicates=3, n_pairs=400, seed=1)
    assert set(suite) == {"naive_mixed_all", "outcome_dependence", "covariate_explicit", "covariate_mixed"}
    od = suite["outcome_dependence"]
    assert od.extras["clr_limit"] == pytest.approx(1.349926716949016)
    assert od.extras["true_psi"] == pytest.approx(0.9704370952441121)
    assert od.summary("clr").target == 1.35 and od.summary("clr").band == 0.04
    json.loads(to_json_text(suite))


def test_wald_agreement_small():
    out = run_wald_agreement(replicates=5, n_pairs=500, seed=1)
    assert out["mean_abs_tc_ts"] <= out["max_abs_tc_ts"]
    assert out["null_dependent_clr"].target == 0.0
