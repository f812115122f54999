import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchstudy import fixture_paths
from matchstudy.cohort import (PATTERN_ORDER, ArmLabel, CovariateSchema, StudyData,
                               availability_table, filter_eligibility, impute_covariates,
                               load_cohort, pattern_label, stratify_by_availability)
from matchstudy.errors import ConfigError, DataError

from conftest import make_record

SCHEMA = CovariateSchema(covariates=("a", "b"), outcomes={"LF": {"2004": "lf04"}})


def write(tmp_path, lines):
    path = tmp_path / "c.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


HEADER = ("id,sex,yearbook_available,complex_school,football,hockey,wrestling,soccer,"
          "lacrosse,other-noncontact,football_years,a,b,lf04")


def test_header_only_file_gives_no_records(tmp_path):
    assert load_cohort(write(tmp_path, [HEADER]), SCHEMA) == []


def test_na_covariate_is_missing(tmp_path):
    path = write(tmp_path, [HEADER, "s1,male,1,0,1,0,0,0,0,0,3,NA,2.5,0.1"])
    (rec,) = load_cohort(path, SCHEMA)
    assert math.isnan(rec.covariates[0]) and rec.covariates[1] == 2.5
    assert rec.sports == {"football"} and rec.football_years == 3
    assert rec.outcome("LF", "2004") == pytest.approx(0.1)
    assert math.isnan(rec.outcome("LF", "1993"))


def test_tab_delimiter(tmp_path):
    path = tmp_path / "c.tsv"
    path.write_text(HEADER.replace(",", "\t") + "\ns1\tf\t1\t0\t0\t0\t0\t0\t0\t0\t0\t1\t2\t\n")
    (rec,) = load_cohort(path, SCHEMA, delimiter="\t")
    assert rec.sex == "female"


@pytest.mark.parametrize("row, fragment", [
    ("s1,male,maybe,0,1,0,0,0,0,0,3,1,2,0", "boolean"),
    ("s1,male,1,0,1,0,0,0,0,0,3,x,2,0", "number"),
    ("s1,male,1,0,1,0,0,0,0,0,0,1,2,0", "football"),
    ("s1,male,1,0,1,0", "fields"),
])
def test_malformed_rows_raise_data_error(tmp_path, row, fragment):
    with pytest.raises(DataError, match=fragment):
        load_cohort(write(tmp_path, [HEADER, row]), SCHEMA)


def test_duplicate_ids_and_unknown_columns(tmp_path):
    row = "s1,male,1,0,0,0,0,0,0,0,0,1,2,0"
    with pytest.raises(DataError, match="duplicate"):
        load_cohort(write(tmp_path, [HEADER, row, row]), SCHEMA)
    with pytest.raises(DataError, match="unknown column"):
        load_cohort(write(tmp_path, [HEADER + ",extra", row + ",1"]), SCHEMA)


def test_schema_requires_covariates_and_outcomes():
    with pytest.raises(ConfigError):
        CovariateSchema.from_dict({"covariates": ["a"]})
    with pytest.raises(ConfigError, match="sport"):
        CovariateSchema.from_dict({"covariates": [], "outcomes": {}, "sports": {"rugby": "r"}})


def test_schema_round_trip():
    assert CovariateSchema.from_dict(SCHEMA.to_dict()) == SCHEMA


def test_fixture_reproduces_cascade(fixture_records):
    records, _ = fixture_records
    assert len(records) == 10_317
    t0 = time.perf_counter()
    eligible, report = filter_eligibility(records)
    assert time.perf_counter() - t0 < 5
    assert report.to_dict() == {
        "total": 10_317, "dropped_missing_yearbook": 1_205, "dropped_complex_school": 843,
        "dropped_female": 4_296, "males_remaining": 3_973, "dropped_risky_sport": 69,
        "eligible": 3_904, "n_football": 1_153, "n_nonsport": 1_951, "n_othersport": 800,
    }
    assert "3,904" in report.to_text()


def test_fixture_availability_matches_table_2(fixture_records):
    records, _ = fixture_records
    eligible, _ = filter_eligibility(records)
    rows = {r[0]: r[1:] for r in availability_table(eligible, "2004")}
    assert rows["LF, DWR, CES-D"] == (467, 682, 301, 983)
    assert rows["None"] == (319, 659, 234, 893)
    assert sum(r[0] for r in rows.values()) == 1_153
    assert sum(r[1] for r in rows.values()) == 1_951
    assert sum(r[2] for r in rows.values()) == 800


def test_all_female_input():
    recs = [make_record(f"f{k}", sex="female") for k in range(5)]
    eligible, report = filter_eligibility(recs)
    assert eligible == [] and report.dropped_female == 5


def test_single_eligible_football_player():
    rec = make_record("m1", sports=["football"])
    eligible, report = filter_eligibility([rec])
    assert eligible == [rec] and report.n_football == 1


def test_football_player_who_also_wrestles_stays_football():
    eligible, report = filter_eligibility([make_record("m", sports=["football", "wrestling"])])
    assert report.n_football == 1 and report.dropped_risky_sport == 0


def test_stratum_membership():
    full = make_record("a", outcomes={("LF", "2004"): 1, ("DWR", "2004"): 1, ("CESD", "2004"): 1})
    none = make_record("b", outcomes={("LF", "2004"): math.nan})
    strata = stratify_by_availability([full, none], "2004")
    assert [s.pattern for s in strata] == [frozenset({"LF", "DWR", "CESD"}), frozenset()]
    assert strata[-1].label == "None" and strata[0].key == "LF+DWR+CESD"


def test_everything_missing_gives_single_none_stratum():
    recs = [make_record(f"s{k}", outcomes={("LF", "2004"): math.nan}) for k in range(4)]
    (only,) = stratify_by_availability(recs, "2004")
    assert only.pattern == frozenset() and len(only.members) == 4


def test_unknown_wave_rejected():
    with pytest.raises(DataError, match="wave"):
        stratify_by_availability([make_record("a", outcomes={("LF", "2004"): 1})], "1957")


def test_pattern_labels_cover_table_rows():
    assert [pattern_label(p) for p in PATTERN_ORDER] == [
        "LF, DWR, CES-D", "LF, DWR", "LF, CES-D", "DWR, CES-D", "LF", "DWR", "CES-D", "None"]


def test_imputation_appends_indicator():
    recs = [make_record("a", covariates=(1.0, 5.0)), make_record("b", covariates=(math.nan, 7.0)),
            make_record("c", covariates=(3.0, 9.0))]
    X, names = impute_covariates(recs, ("x", "y"))
    assert names == ["x", "y", "x_missing"]
    np.testing.assert_allclose(X, [[1, 5, 0], [2, 7, 1], [3, 9, 0]])


def test_covariate_missing_everywhere_is_an_error():
    recs = [make_record("a", covariates=(math.nan,))]
    with pytest.raises(DataError):
        impute_covariates(recs, ("x",))


record_strategy = st.builds(
    lambda sex, yb, cx, sports: (sex, yb, cx, sports),
    st.sampled_from(["male", "female"]), st.booleans(), st.booleans(),
    st.frozensets(st.sampled_from(["football", "hockey", "wrestling", "other-noncontact"])))


@settings(max_examples=60, deadline=None)
@given(st.lists(record_strategy, max_size=40))
def test_cascade_reconciles_and_strata_partition(raw):
    recs = []
    for k, (sex, yb, cx, sports) in enumerate(raw):
        outcomes = {("LF", "2004"): float(k % 2 or "nan"), ("CESD", "2004"): float(k % 3)}
        recs.append(make_record(f"s{k}", sex, yb, cx, sports, covariates=(float(k),),
                                outcomes=outcomes))
    eligible, r = filter_eligibility(recs)
    assert (r.dropped_missing_yearbook + r.dropped_complex_school + r.dropped_female
            + r.dropped_risky_sport + r.eligible) == r.total == len(recs)
    assert r.n_football + r.n_nonsport + r.n_othersport == r.eligible
    if eligible:
        members = [m for s in stratify_by_availability(eligible, "2004") for m in s.members]
        assert sorted(members) == sorted(e.id for e in eligible)
        study = StudyData.from_records(eligible, SCHEMA.__class__(("x",), {}))
        arms = set(study.arms)
        assert arms <= {a.value for a in ArmLabel}
