import numpy as np
import pytest

from matchstudy import fixture_paths
from matchstudy.cohort import CovariateSchema, SubjectRecord, load_cohort


def make_record(sid, sex="male", yearbook=True, complex_school=False, sports=(), years=None,
                covariates=(0.0,), outcomes=None):
    sports = frozenset(sports)
    if years is None:
        years = 2 if "football" in sports else 0
    return SubjectRecord(sid, sex, yearbook, complex_school, sports, years, tuple(covariates),
                         dict(outcomes or {}))


@pytest.fixture(scope="session")
def fixture_records():
    csv_path, schema_path = fixture_paths()
    schema = CovariateSchema.from_json(schema_path)
    return load_cohort(csv_path, schema), schema


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
