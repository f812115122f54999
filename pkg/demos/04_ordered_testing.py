"""Primary analysis with Holm across outcomes and ordered stages within each.

Plants a harmful effect on the cognitive components only, runs the pipeline
in memory up to the primary stage and prints the results table.
"""
import tempfile
from pathlib import Path

from matchstudy.pipeline import Pipeline, StudyConfig
from matchstudy.synthetic import OutcomeSpec, SyntheticSpec, synthetic_records

spec = SyntheticSpec(
    n_football=250, n_nonsport=400, n_othersport=250,
    covariates=("iq", "parent_edu", "hssize", "farm"),
    football_shift=(0.2, -0.1, -0.3, 0.1),
    outcomes=(OutcomeSpec("LF", "2004", effect=-0.4), OutcomeSpec("DWR", "2004", effect=-0.4),
              OutcomeSpec("CESD", "2004")))
records, schema = synthetic_records(spec, seed=3)
cfg = StudyConfig(cohort_path="in-memory", schema_path="in-memory", dose_analysis=False)
with tempfile.TemporaryDirectory() as out:
    pipe = Pipeline(cfg, out, records, schema)
    pipe.run("primary")
    print((Path(out) / "tables/results.tsv").read_text())
    for rep in pipe.state.primary_reports:
        print(f"{rep.outcome}: Holm level {rep.alpha_used:.4f}, stopped at {rep.stop_stage}")
