"""Holm, Benjamini-Hochberg and the ordered (fixed-sequence) testing procedure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STAGES = ("stage1", "stage2a", "stage2b", "stage3")
STAGE_TITLES = {
    "stage1": "Football vs all controls",
    "stage2a": "Football vs non-sport",
    "stage2b": "Football vs other-sport",
    "stage3": "Non-sport vs other-sport (equivalence)",
}


def _check(p_values, level):
    p = np.asarray(p_values, dtype=float)
    if p.size and (np.isnan(p).any() or p.min() < 0 or p.max() > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return p


def holm_bonferroni(p_values, alpha):
    """Step-down Holm rejections, returned in input order."""
    p = _check(p_values, alpha)
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for rank, k in enumerate(order):
        if p[k] <= alpha / (m - rank):
            reject[k] = True
        else:
            break
    return reject.tolist()


def holm_levels(p_values, alpha):
    """Level at which Holm tests each hypothesis.

    The hypothesis of rank ``r`` (0-based) gets ``alpha / (m - r)`` if every
    smaller p-value was rejected; once the procedure stops, the remaining
    hypotheses keep the level of the step that failed, where none of them can
    be rejected.
    """
    p = _check(p_values, alpha)
    m = len(p)
    order = np.argsort(p, kind="stable")
    levels = np.zeros(m)
    stop = None
    for rank, k in enumerate(order):
        step = rank if stop is None else stop
        levels[k] = alpha / (m - step)
        if stop is None and p[k] > levels[k]:
            stop = rank
    return levels.tolist()


def benjamini_hochberg(p_values, q):
    """Step-up BH rejections, returned in input order."""
    p = _check(p_values, q)
    m = len(p)
    if m == 0:
        return []
    order = np.argsort(p, kind="stable")
    passed = p[order] <= q * np.arange(1, m + 1) / m
    reject = np.zeros(m, dtype=bool)
    if passed.any():
        k = int(np.flatnonzero(passed).max())
        reject[order[:k + 1]] = True
    return reject.tolist()


@dataclass
class StageOutcome:
    result: object
    decided: bool = False
    rejected: bool = False

    @property
    def star(self):
        return "*" if self.decided and self.rejected else ""

    def to_dict(self):
        return {"decided": self.decided, "rejected": self.rejected,
                "result": None if self.result is None else self.result.to_dict()}


@dataclass
class OrderedTestReport:
    outcome: str
    stages: dict
    stop_stage: object
    alpha_used: float
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        passed = {k: v.decided and v.rejected for k, v in self.stages.items()}
        # 2a and 2b are tested side by side once stage 1 rejects
        gate = {"stage1": True, "stage2a": passed["stage1"], "stage2b": passed["stage1"],
                "stage3": passed["stage1"] and passed["stage2a"] and passed["stage2b"]}
        for name in STAGES:
            st = self.stages[name]
            if st.decided and not gate[name]:
                raise AssertionError(f"{name} decided although an earlier stage did not reject")
            if st.rejected and not st.decided:
                raise AssertionError(f"{name} rejected without being decided")

    def to_dict(self):
        return {"outcome": self.outcome, "alpha_used": self.alpha_used,
                "stop_stage": self.stop_stage,
                "stages": {k: v.to_dict() for k, v in self.stages.items()},
                "notes": self.notes}


def _resolve(x):
    return x() if callable(x) else x


def ordered_procedure(outcome, stage1, stage2a, stage2b, stage3, alpha):
    """Fixed-sequence testing: 1, then 2a and 2b, then the stage-3 equivalence test.

    Each stage argument is a TestResult or a zero-argument callable producing
    one. Every stage is evaluated so its estimate can be reported, but only
    stages reached under the stopping rule are decided.
    """
    results = dict(zip(STAGES, (_resolve(s) for s in (stage1, stage2a, stage2b, stage3))))
    stages = {k: StageOutcome(v) for k, v in results.items()}

    def run(name):
        st = stages[name]
        st.decided = st.result is not None
        st.rejected = st.decided and st.result.p_value <= alpha
        return st.rejected

    stop = "completed"
    if not run("stage1"):
        stop = 1
    else:
        ok_a, ok_b = run("stage2a"), run("stage2b")
        if not (ok_a and ok_b):
            stop = 2
        elif not run("stage3"):
            stop = 3
    return OrderedTestReport(outcome, stages, stop, alpha,
                             {"stage3_level": "same per-outcome alpha as stages 1-2"})


def primary_family(stage_tests, alpha=0.05):
    """Holm across outcomes on their stage-1 p-values, then gatekeeping per outcome.

    ``stage_tests`` maps outcome label to ``(stage1, stage2a, stage2b, stage3)``.
    """
    labels = list(stage_tests)
    firsts = [_resolve(stage_tests[k][0]) for k in labels]
    levels = holm_levels([r.p_value for r in firsts], alpha)
    reports = []
    for lab, first, level in zip(labels, firsts, levels):
        _, s2a, s2b, s3 = stage_tests[lab]
        rep = ordered_procedure(lab, first, s2a, s2b, s3, level)
        rep.notes["family_alpha"] = alpha
        reports.append(rep)
    return reports


def _cell(result, star, digits):
    if result is None:
        return "NA"
    f = f"{{:.{digits}f}}"

    def num(x):
        if isinstance(x, str):
            return x
        if math.isinf(x):
            return "Inf" if x > 0 else "-Inf"
        return f.format(x)
    return f"{num(result.estimate)} ({num(result.ci_low)}, {num(result.ci_high)}){star}"


def render_results_table(reports, secondary=(), digits=2, delimiter="\t"):
    """Table of estimates with marginal intervals; stars mark decided rejections.

    ``secondary`` holds ``(outcome, comparison, TestResult, bh_reject)`` tuples
    and is rendered as a second block with the marginal p-value.
    """
    lines = [delimiter.join(["Outcome"] + [STAGE_TITLES[s] for s in STAGES])]
    for rep in reports:
        cells = [_cell(rep.stages[s].result, rep.stages[s].star, digits) for s in STAGES]
        lines.append(delimiter.join([rep.outcome] + cells))
    secondary = list(secondary)
    if secondary:
        lines.append("")
        lines.append(delimiter.join(["Secondary outcome", "Comparison", "Estimate (CI)",
                                     "p", "BH"]))
        for outcome, comparison, res, flag in secondary:
            lines.append(delimiter.join([outcome, comparison, _cell(res, "", digits),
                                         f"{res.p_value:.4f}", "reject" if flag else "-"]))
    return "\n".join(lines) + "\n"
