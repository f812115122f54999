import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matchstudy.inference import TestResult
from matchstudy.multiplicity import (
    OrderedTestReport, StageOutcome, benjamini_hochberg, holm_bonferroni, holm_levels,
    ordered_procedure, primary_family, render_results_table,
)

GOLDEN = Path(__file__).parent / "golden"
p_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12)


def res(p, est=0.1, label="x"):
    return TestResult(label, est, est - 0.1, est + 0.1, p, 10, 20, 10, se=0.05, df=30.0)


def test_holm_example():
    assert holm_bonferroni([0.01, 0.04, 0.03, 0.005], 0.05) == [True, False, False, True]
    assert holm_levels([0.01, 0.04, 0.03, 0.005], 0.05) == pytest.approx(
        [0.05 / 3, 0.05 / 2, 0.05 / 2, 0.05 / 4])


def test_holm_levels_when_everything_rejects():
    assert holm_levels([0.001, 0.002], 0.05) == pytest.approx([0.025, 0.05])
    assert holm_levels([0.2, 0.001], 0.05) == pytest.approx([0.05, 0.025])


def test_bh_example():
    assert benjamini_hochberg([0.01, 0.04, 0.03, 0.005], 0.05) == [True] * 4
    # step-up: the largest passing rank carries smaller p-values that fail their own cut
    assert benjamini_hochberg([0.04, 0.045, 0.3], 0.1) == [True, True, False]
    assert benjamini_hochberg([0.04, 0.045, 0.3], 0.05) == [False, False, False]
    assert benjamini_hochberg([], 0.05) == []


def test_invalid_inputs():
    with pytest.raises(ValueError):
        holm_bonferroni([0.1, 1.2], 0.05)
    with pytest.raises(ValueError):
        benjamini_hochberg([0.1, float("nan")], 0.05)
    with pytest.raises(ValueError):
        holm_bonferroni([0.1], 0.0)


@settings(max_examples=200, deadline=None)
@given(p_lists, st.floats(0.001, 0.5))
def test_holm_contains_bonferroni(p, alpha):
    holm = holm_bonferroni(p, alpha)
    bonf = [x <= alpha / len(p) for x in p]
    assert all(h or not b for h, b in zip(holm, bonf))
    levels = holm_levels(p, alpha)
    assert holm == [x <= lv for x, lv in zip(p, levels)]


@settings(max_examples=200, deadline=None)
@given(p_lists, st.floats(0.001, 0.4), st.floats(0.0, 0.4))
def test_bh_monotone_in_q(p, q, extra):
    small = benjamini_hochberg(p, q)
    large = benjamini_hochberg(p, min(q + extra, 0.99))
    assert all(b or not a for a, b in zip(small, large))
    assert all(h <= b for h, b in zip(holm_bonferroni(p, q), small))


def test_ordered_procedure_star_pattern():
    rep = ordered_procedure("cognitive", res(0.001), res(0.2), res(0.01), res(0.001), 0.05)
    assert [rep.stages[s].star for s in ("stage1", "stage2a", "stage2b", "stage3")] == \
        ["*", "", "*", ""]
    assert rep.stop_stage == 2
    assert rep.stages["stage2a"].decided and not rep.stages["stage2a"].rejected
    assert not rep.stages["stage3"].decided
    assert rep.stages["stage3"].result.p_value == 0.001


def test_ordered_procedure_stops_and_completes():
    stop1 = ordered_procedure("d", res(0.3), res(0.001), res(0.001), res(0.001), 0.05)
    assert stop1.stop_stage == 1
    assert not any(stop1.stages[s].decided for s in ("stage2a", "stage2b", "stage3"))
    full = ordered_procedure("d", res(0.001), res(0.01), res(0.02), res(0.03), 0.05)
    assert full.stop_stage == "completed"
    assert all(v.star == "*" for v in full.stages.values())
    failed3 = ordered_procedure("d", res(0.001), res(0.01), res(0.02), res(0.3), 0.05)
    assert failed3.stop_stage == 3 and failed3.stages["stage3"].decided


def test_callable_stages_are_evaluated():
    calls = []

    def later():
        calls.append(1)
        return res(0.5)
    rep = ordered_procedure("d", res(0.9), later, later, later, 0.05)
    assert len(calls) == 3
    assert rep.stages["stage2b"].result.p_value == 0.5


def test_report_invariant():
    stages = {"stage1": StageOutcome(res(0.5), True, False),
              "stage2a": StageOutcome(res(0.01), True, True),
              "stage2b": StageOutcome(res(0.5)), "stage3": StageOutcome(res(0.5))}
    with pytest.raises(AssertionError):
        OrderedTestReport("x", stages, 1, 0.05)


def test_primary_family_levels():
    reps = primary_family({"cognitive": (res(0.02), res(0.001), res(0.001), res(0.001)),
                           "depression": (res(0.01), res(0.001), res(0.001), res(0.001))}, 0.05)
    cog, dep = reps
    assert dep.alpha_used == pytest.approx(0.025)
    assert cog.alpha_used == pytest.approx(0.05)
    assert cog.stop_stage == "completed" and dep.stop_stage == "completed"
    reps = primary_family({"cognitive": (res(0.04), res(0.001), res(0.001), res(0.001)),
                           "depression": (res(0.03), res(0.001), res(0.001), res(0.001))}, 0.05)
    assert [r.stop_stage for r in reps] == [1, 1]
    assert all(r.alpha_used == pytest.approx(0.025) for r in reps)


def test_family_error_rate_under_global_null():
    rng = np.random.default_rng(11)
    errors = 0
    n = 20000
    for _ in range(n):
        p = rng.random(8)
        reps = primary_family({"a": tuple(res(x) for x in p[:4]),
                               "b": tuple(res(x) for x in p[4:])}, 0.05)
        errors += any(s.rejected for r in reps for s in r.stages.values())
    assert errors / n <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / n)


def _golden_reports():
    cog = ordered_procedure("cognitive", res(0.001, -0.25), res(0.2, -0.05),
                            res(0.01, -0.31), res(0.001, 0.02), 0.025)
    dep = ordered_procedure("depression", res(0.6, 0.04), res(0.7, 0.03), res(0.4, 0.06),
                            res(0.3, float("inf")), 0.05)
    secondary = [("hostility_2004", "Football vs all controls", res(0.0123, 0.11), True),
                 ("sei_1975", "Football vs all controls", res(0.41, -0.02), False)]
    return [cog, dep], secondary


def test_results_table_golden():
    reports, secondary = _golden_reports()
    text = render_results_table(reports, secondary)
    path = GOLDEN / "results_table.tsv"
    if os.environ.get("MATCHSTUDY_WRITE_GOLDEN"):
        path.write_text(text, encoding="utf-8")
    assert text == path.read_text(encoding="utf-8")
    assert "-0.25 (-0.35, -0.15)*" in text
    assert "-0.05 (-0.15, 0.05)\t" in text
    assert "Inf" in text
