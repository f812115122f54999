"""Walk the bundled shape fixture through the eligibility cascade.

The fixture has the cohort's row counts and missingness pattern but synthetic
values. Prints each exclusion step and the outcome-availability strata.
"""
from matchstudy import fixture_paths
from matchstudy.cohort import (CovariateSchema, availability_table, filter_eligibility,
                               load_cohort)

csv_path, schema_path = fixture_paths()
records = load_cohort(csv_path, CovariateSchema.from_json(schema_path))
eligible, report = filter_eligibility(records)
print(report.to_text())

print("\navailability at 2004 (pattern, football, non-sport, other-sport, all controls)")
for row in availability_table(eligible, "2004"):
    print("  " + "\t".join(str(x) for x in row))
