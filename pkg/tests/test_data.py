import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchcohort import (
    AllPairSummary,
    ConcordantPairError,
    DataError,
    DiscordantTable,
    PairedCohort,
    PairingError,
    Schema,
    SubjectRecord,
    filter_discordant,
    ingest_pairs,
    parse_counts,
    tabulate_all,
    tabulate_discordant,
    write_cohort,
)
from matchcohort.simulation import TwinSimConfig, derive_seed_stream, generate_twin_sample


def cohort_from(x, y, **cov):
    x = np.asarray(x).reshape(-1, 2)
    n = x.shape[0]
    return PairedCohort(tuple(str(i) for i in range(n)), x, np.asarray(y).reshape(n, 2),
                        {k: np.asarray(v, dtype=float).reshape(n, 2) for k, v in cov.items()})


pair_patterns = st.lists(
    st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)),
    min_size=1, max_size=40,
)


def cohort_strategy_build(rows):
    a = np.array(rows)
    return cohort_from(a[:, :2], a[:, 2:])


# ---------------------------------------------------------------- ingestion


def test_ingest_single_pair():
    c = ingest_pairs("pair_id,member,exposure,outcome\np1,1,1,1\np1,2,0,0\n")
    assert c.n_pairs == 1
    assert c.exposure.tolist() == [[1, 0]]
    assert c.outcome.tolist() == [[1, 0]]


def test_ingest_rejects_nonbinary_exposure_with_line_number():
    with pytest.raises(DataError, match="line 3"):
        ingest_pairs("pair_id,member,exposure,outcome\np1,1,1,1\np1,2,2,0\n")


def test_ingest_rejects_triplicated_pair_id():
    text = "pair_id,exposure,outcome\na,1,1\na,0,0\na,1,0\nb,1,0\n"
    with pytest.raises(PairingError) as info:
        ingest_pairs(text)
    assert "a" in info.value.pair_ids


def test_ingest_rejects_duplicate_member():
    with pytest.raises(PairingError, match="p1"):
        ingest_pairs("pair_id,member,exposure,outcome\np1,1,1,1\np1,1,0,0\n")


def test_ingest_rejects_lonely_subject():
    with pytest.raises(PairingError, match="q"):
        ingest_pairs("pair_id,member,exposure,outcome\np,1,1,1\np,2,0,0\nq,1,1,0\n")


def test_ingest_missing_column():
    with pytest.raises(DataError, match="outcome"):
        ingest_pairs("pair_id,member,exposure\np,1,1\np,2,0\n")


def test_ingest_missing_outcome_value():
    with pytest.raises(DataError, match="missing outcome"):
        ingest_pairs("pair_id,member,exposure,outcome\np,1,1,\np,2,0,0\n")


def test_ingest_empty_input():
    with pytest.raises(DataError):
        ingest_pairs("")
    with pytest.raises(DataError, match="no pairs"):
        ingest_pairs("pair_id,member,exposure,outcome\n")


def test_ingest_tab_delimited_with_covariates_and_order():
    text = "pair_id\tmember\texposure\toutcome\tage\np\t2\t0\t1\t40\np\t1\t1\t0\t41.5\n"
    c = ingest_pairs(text)
    # members are sorted by index
    assert c.exposure.tolist() == [[1, 0]]
    assert c.covariates["age"].tolist() == [[41.5, 40.0]]


def test_ingest_wide_format():
    text = "id,exposure_1,exposure_2,outcome_1,outcome_2,age_1,age_2\n7,1,0,1,1,3,4\n"
    c = ingest_pairs(text, Schema(pair_id="id", wide=True))
    assert c.pair_ids == ("7",)
    assert c.outcome.tolist() == [[1, 1]]
    assert c.covariates["age"].tolist() == [[3.0, 4.0]]


def test_ingest_non_numeric_covariate():
    with pytest.raises(DataError, match="covariate"):
        ingest_pairs("pair_id,exposure,outcome,z\na,1,1,x\na,0,0,1\n")


def test_ingest_from_path(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("pair_id,member,exposure,outcome\np1,1,1,1\np1,2,0,0\n")
    c = ingest_pairs(p)
    assert c.source == str(p)


def test_subject_record_validation():
    with pytest.raises(DataError):
        SubjectRecord("a", 3, 1, 1)
    with pytest.raises(DataError):
        SubjectRecord("a", 1, 1, 2)


def test_cohort_arrays_are_read_only():
    c = cohort_from([[1, 0]], [[1, 0]])
    with pytest.raises(ValueError):
        c.exposure[0, 0] = 0


def test_round_trip_preserves_tabulation():
    cohort = generate_twin_sample(TwinSimConfig(n_pairs=300, psi_c=0.5), derive_seed_stream(3, 0), keep_latent=True)
    buf = io.StringIO()
    write_cohort(cohort, buf)
    back = ingest_pairs(buf.getvalue())
    assert back == cohort
    assert tabulate_all(back) == tabulate_all(cohort)


@settings(max_examples=60, deadline=None)
@given(pair_patterns)
def test_round_trip_property(rows):
    c = cohort_strategy_build(rows)
    buf = io.StringIO()
    write_cohort(c, buf)
    back = ingest_pairs(buf.getvalue())
    assert back == c
    assert tabulate_all(back) == tabulate_all(c)


# ---------------------------------------------------------------- tabulation


def test_tabulate_discordant_single_pair():
    c = cohort_from([[1, 0]], [[1, 0]])
    assert tabulate_discordant(c) == DiscordantTable(0, 1, 0, 0)


def test_tabulate_discordant_two_pairs():
    # (y_exposed, y_unexposed) = (1,1) and (0,1); exposed member listed second in the latter
    c = cohort_from([[1, 0], [0, 1]], [[1, 1], [1, 0]])
    assert tabulate_discordant(c) == DiscordantTable(1, 0, 1, 0)


def test_tabulate_discordant_rejects_concordant_pair():
    c = cohort_from([[1, 0], [1, 1]], [[0, 0], [1, 0]])
    with pytest.raises(ConcordantPairError) as info:
        tabulate_discordant(c)
    assert list(info.value.pair_ids) == ["1"]


@settings(max_examples=80, deadline=None)
@given(pair_patterns)
def test_discordant_margins_property(rows):
    c = filter_discordant(cohort_strategy_build(rows)) if any(r[0] != r[1] for r in rows) else None
    if c is None:
        return
    t = tabulate_discordant(c)
    assert t.n == c.n_pairs
    assert t.n11 + t.n01 == t.n10 + t.n00 == t.n


@settings(max_examples=80, deadline=None)
@given(pair_patterns)
def test_member_order_invariance(rows):
    c = cohort_strategy_build(rows)
    swapped = PairedCohort(c.pair_ids, c.exposure[:, ::-1], c.outcome[:, ::-1])
    assert tabulate_all(c) == tabulate_all(swapped)


def test_filter_discordant_identity_and_empty():
    c = cohort_from([[1, 0], [0, 1]], [[1, 0], [0, 0]])
    assert filter_discordant(c) is c
    conc = cohort_from([[1, 1], [0, 0]], [[1, 0], [0, 0]])
    with pytest.warns(UserWarning, match="empty"):
        out = filter_discordant(conc)
    assert out.n_pairs == 0


def test_filter_discordant_counts_and_idempotence():
    rng = np.random.default_rng(0)
    x = np.zeros((3107, 2), dtype=int)
    disc = rng.choice(3107, 1087, replace=False)
    x[disc, 0] = 1
    both = np.setdiff1d(np.arange(3107), disc)[:500]
    x[both] = 1
    c = cohort_from(x, rng.integers(0, 2, (3107, 2)))
    f = filter_discordant(c)
    assert f.n_pairs == 1087
    assert filter_discordant(f) == f


def test_tabulate_all_single_discordant_pair():
    s = tabulate_all(cohort_from([[1, 0]], [[1, 0]]))
    assert s.r[1, 1] == 1 and s.r[0, 0] == 1 and s.r[0, 1] == 0 and s.r[1, 0] == 0
    assert s.qd_hat == 1.0
    assert s.cd_hat == 0.0


def test_tabulate_all_perfect_concordance_nonnegative_covariance():
    c = cohort_from([[1, 1]] * 4 + [[1, 0]], [[1, 1], [0, 0], [1, 1], [0, 0], [1, 0]])
    s = tabulate_all(c)
    assert s.c11_hat == pytest.approx(0.25)
    assert s.c11_hat >= 0


def test_tabulate_all_empty_cohort():
    with pytest.raises(DataError):
        tabulate_all(cohort_from(np.zeros((0, 2)), np.zeros((0, 2))))


def test_tabulate_all_discordance_rate_matches_design():
    s = tabulate_all(generate_twin_sample(TwinSimConfig(), derive_seed_stream(11, 0)))
    se = np.sqrt((1 / 3) * (2 / 3) / 2000)
    assert abs(s.qd_hat - 1 / 3) < 3 * se


@settings(max_examples=80, deadline=None)
@given(pair_patterns)
def test_summary_invariants(rows):
    c = cohort_strategy_build(rows)
    s = tabulate_all(c)
    assert s.r.sum() == 2 * s.n_pairs
    assert s.q00_hat + s.q11_hat + s.qd_hat == pytest.approx(1.0)
    for v in (s.c00_hat, s.c11_hat, s.cd_hat):
        assert -0.25 <= v <= 0.25


def test_purely_discordant_summary():
    s = tabulate_all(cohort_from([[1, 0], [0, 1], [1, 0]], [[1, 0], [1, 1], [0, 0]]))
    assert (s.qd_hat, s.q00_hat, s.q11_hat) == (1.0, 0.0, 0.0)


# ---------------------------------------------------------------- counts


def test_parse_counts_table_forms():
    assert parse_counts("t=0,u=4,v=2,w=0") == DiscordantTable(0, 4, 2, 0)
    assert parse_counts('{"t": 1, "u": 2, "v": 3, "w": 4}') == DiscordantTable(1, 2, 3, 4)
    assert parse_counts({"u": 5, "v": 1}) == DiscordantTable(0, 5, 1, 0)


def test_parse_counts_summary_and_consistency():
    s = parse_counts("t=1,u=2,v=3,w=4,conc0_0=5,conc0_1=1,conc0_2=0,conc1_0=0,conc1_1=2,conc1_2=3")
    assert isinstance(s, AllPairSummary)
    assert s.n_pairs == 10 + 6 + 5
    good = dict(s.as_dict())
    assert parse_counts(good) == s
    bad = dict(good, r11=good["r11"] + 1)
    with pytest.raises(DataError, match="r11"):
        parse_counts(bad)


@pytest.mark.parametrize("text", ["t=1,u=x", "t=-1", "t=1.5", "z=3", "{bad json", "u"])
def test_parse_counts_errors(text):
    with pytest.raises(DataError):
        parse_counts(text)


def test_table_validation():
    with pytest.raises(DataError):
        DiscordantTable(-1, 0, 0, 0)
