import csv
import math

import numpy as np
import pytest

from matchstudy.cohort import CovariateSchema, StudyData, filter_eligibility, load_cohort
from matchstudy.errors import ConfigError
from matchstudy.synthetic import (
    STUDY_COVARIATES, OutcomeSpec, SyntheticSpec, build_shape_fixture, generate_synthetic,
    graded_shifts, synthetic_records,
)


def small_spec(**kw):
    base = dict(n_football=40, n_nonsport=50, n_othersport=30, covariates=("a", "b", "c"))
    base.update(kw)
    return SyntheticSpec(**base)


def test_zero_subjects_gives_header_only_file(tmp_path):
    spec = small_spec(n_football=0, n_nonsport=0, n_othersport=0)
    path, schema_path = generate_synthetic(spec, 0, tmp_path / "cohort.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    schema = CovariateSchema.from_json(schema_path)
    assert lines[0].split(schema.delimiter) == schema.columns()
    assert load_cohort(path, schema) == []


def test_round_trip_through_csv(tmp_path):
    spec = small_spec(covariate_missing_rate=0.1)
    records, _ = synthetic_records(spec, 5)
    path, schema_path = generate_synthetic(spec, 5, tmp_path / "c.csv")
    loaded = load_cohort(path, CovariateSchema.from_json(schema_path))
    assert [r.id for r in loaded] == [r.id for r in records]
    for a, b in zip(loaded, records):
        assert a.sports == b.sports and a.football_years == b.football_years
        np.testing.assert_allclose(a.covariates, b.covariates, rtol=1e-5, atol=1e-6)
    assert any(math.isnan(v) for r in loaded for v in r.covariates)


def test_deterministic_given_seed(tmp_path):
    spec = small_spec()
    a = generate_synthetic(spec, 3, tmp_path / "a.csv")[0].read_bytes()
    b = generate_synthetic(spec, 3, tmp_path / "b.csv")[0].read_bytes()
    c = generate_synthetic(spec, 4, tmp_path / "c.csv")[0].read_bytes()
    assert a == b and a != c


@pytest.mark.parametrize("kw", [
    dict(n_football=-1), dict(gamma0=0.5), dict(football_shift=(0.1,)),
    dict(dose_probs=(0.5, 0.5, 0.5, 0.0)), dict(correlation=1.0),
    dict(outcomes=(OutcomeSpec("LF", "2004", missing_rate=1.5),)),
    dict(outcomes=(OutcomeSpec("LF", "2004", kind="ordinal"),)),
])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        small_spec(**kw)


def test_from_dict_round_trip_and_unknown_key():
    spec = small_spec(gamma0=2.0, football_shift=(0.1, 0.2, 0.3))
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"n_footbal": 3})


def test_shifts_and_planted_effects():
    shifts = (0.5, -0.3, 0.0)
    spec = SyntheticSpec(n_football=4000, n_nonsport=4000, n_othersport=0,
                         covariates=("a", "b", "c"), football_shift=shifts,
                         outcomes=(OutcomeSpec("y", "2004", effect=0.3, signal=0.0),
                                   OutcomeSpec("d", "2004", effect=0.1, per_year=True,
                                               signal=0.0)))
    records, schema = synthetic_records(spec, 9)
    study = StudyData.from_records(records, schema)
    fb = study.arms == "Football"
    np.testing.assert_allclose(study.X[fb].mean(0) - study.X[~fb].mean(0), shifts, atol=0.06)
    y = study.outcome("y", "2004")
    assert abs(y[fb].mean() - y[~fb].mean() - 0.3) < 0.06
    d = study.outcome("d", "2004")
    years = np.array([r.football_years for r in records])
    assert set(years[fb]) == {1, 2, 3, 4} and not years[~fb].any()
    slope = np.polyfit(years[fb], d[fb], 1)[0]
    assert abs(slope - 0.1) < 0.03


def test_hidden_confounder_assignment_odds():
    spec = small_spec(n_football=20000, n_nonsport=20000, n_othersport=0, gamma0=3.0,
                      outcomes=(OutcomeSpec("y", "2004", signal=0.0, noise_sd=0.0,
                                            confounder_loading=1.0),))
    records, schema = synthetic_records(spec, 1)
    study = StudyData.from_records(records, schema)
    u = study.outcome("y", "2004")
    fb = study.arms == "Football"
    p1, p0 = u[fb].mean(), u[~fb].mean()
    assert abs(p1 - 0.75) < 0.01 and abs(p0 - 0.5) < 0.01
    assert abs((p1 / (1 - p1)) / (p0 / (1 - p0)) - 3.0) < 0.2


def test_differential_missingness():
    spec = small_spec(n_football=5000, n_nonsport=5000, n_othersport=0,
                      outcomes=(OutcomeSpec("y", "2004", missing_rate=0.2,
                                            missing_football_logit=1.0),))
    records, schema = synthetic_records(spec, 2)
    study = StudyData.from_records(records, schema)
    miss = np.isnan(study.outcome("y", "2004"))
    fb = study.arms == "Football"
    assert abs(miss[~fb].mean() - 0.2) < 0.02
    assert miss[fb].mean() > 0.35


def test_graded_shifts():
    g = graded_shifts(24, 0.5, seed=3)
    assert len(g) == 24 and max(g) == 0.5 and min(g) == -0.5
    assert sorted(g) == pytest.approx(list(np.linspace(-0.5, 0.5, 24)))
    assert len(STUDY_COVARIATES) == 24


def test_shape_fixture_cascade():
    records, schema = build_shape_fixture()
    eligible, report = filter_eligibility(records)
    assert report.to_dict()["eligible"] == 3904
    assert len(eligible) == 3904


def test_written_columns_follow_schema(tmp_path):
    spec = small_spec()
    path, schema_path = generate_synthetic(spec, 1, tmp_path / "c.csv")
    schema = CovariateSchema.from_json(schema_path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh, delimiter=schema.delimiter))
    assert header[0] == "id" and "a" in header and "LF_2004" in header
