"""Covariate balance before and after matching, with a Love plot.

Usage: python demos/03_balance_love_plot.py [output.svg]
"""
import sys
import tempfile
from pathlib import Path

from matchstudy.balance import emit_love_plot, format_balance_table, study_balance
from matchstudy.cohort import StudyData, stratify_by_availability
from matchstudy.fullmatch import MatchConstraints, stratified_full_match
from matchstudy.synthetic import (STUDY_COVARIATES, OutcomeSpec, SyntheticSpec, graded_shifts,
                                  synthetic_records)

controls = ("NonSportControl", "OtherSportControl")
spec = SyntheticSpec(n_football=300, n_nonsport=500, n_othersport=200,
                     covariates=STUDY_COVARIATES,
                     football_shift=graded_shifts(24, 0.25, seed=3),
                     outcomes=(OutcomeSpec("LF", "2004"),))
records, schema = synthetic_records(spec, seed=2)
study = StudyData.from_records(records, schema)
strata = [s for s in stratify_by_availability(records, "2004") if s.pattern]
sm = stratified_full_match(study, strata, "Football", controls, MatchConstraints(6, 1))
rows = study_balance(study, "Football", controls, sm.matchings)
print(format_balance_table(rows))

out = sys.argv[1] if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "love_plot.svg"
emit_love_plot(rows, out, "Football vs all controls")
print(f"Love plot written to {out}")
