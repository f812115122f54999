"""Outcome construction and matched-set tests.

Covariance-adjusted regression with matched-set fixed effects,
Mantel-Haenszel tests for binary indicators, TOST equivalence, the
years-of-football dose analysis and attrition models.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .cohort import ArmLabel, PRIMARY_COMPONENTS
from .errors import DataError, NumericalError
from .fullmatch import MatchedSet
from .glm import DesignMatrix, fit_conditional_logistic, fit_logistic, fit_ols


@dataclass
class CompositeOutcome:
    name: str
    ids: list
    values: np.ndarray
    components: tuple

    def values_for(self, ids):
        pos = {s: k for k, s in enumerate(self.ids)}
        return self.values[[pos[s] for s in ids]]


@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    label: str
    estimate: float
    ci_low: float
    ci_high: float
    p_value: float
    n_treated: int
    n_control: int
    n_sets: int
    se: float = math.nan
    statistic: float = math.nan
    df: float = math.inf
    level: float = 0.95
    method: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self):
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        return out


# outcomes ------------------------------------------------------------------

def z_scores(values):
    """Standardize over the nonmissing entries (sample SD); missing stays NaN."""
    values = np.asarray(values, dtype=float)
    ok = ~np.isnan(values)
    if ok.sum() < 2:
        raise DataError("a z-score needs at least two observed values")
    sd = values[ok].std(ddof=1)
    if not sd > 0:
        raise DataError("outcome component has zero variance")
    return (values - values[ok].mean()) / sd


def composite(z_columns):
    """Row mean of the available z-scores; NaN when all are missing."""
    Z = np.column_stack(z_columns)
    avail = ~np.isnan(Z)
    count = avail.sum(axis=1)
    total = np.where(avail, Z, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def build_primary_outcomes(study, wave):
    """Cognitive (mean of LF and DWR z-scores) and depression (CES-D z-score)."""
    comps = {}
    for c in PRIMARY_COMPONENTS:
        raw = study.outcome(c, wave)
        try:
            comps[c] = z_scores(raw)
        except DataError as exc:
            raise DataError(f"{c} at wave {wave}: {exc}") from None
    ids = list(study.ids)
    cognitive = CompositeOutcome("cognitive", ids, composite([comps["LF"], comps["DWR"]]),
                                 ("LF", "DWR"))
    depression = CompositeOutcome("depression", ids, comps["CESD"], ("CESD",))
    return cognitive, depression


# matched regression ------------------------------------------------------------

def set_labels(sets, ids):
    lab = {}
    for k, ms in enumerate(sets):
        for s in ms.ids:
            lab[s] = k
    missing = [s for s in ids if s not in lab]
    if missing:
        raise DataError(f"{len(missing)} subject(s) are not in any matched set, e.g. {missing[:3]}")
    return np.array([lab[s] for s in ids])


def restrict_sets(sets, keep):
    """Drop subjects not in ``keep`` and sets that lose one side entirely."""
    keep = set(keep)
    out = []
    for ms in sets:
        t = tuple(s for s in ms.treated_ids if s in keep)
        c = tuple(s for s in ms.control_ids if s in keep)
        if t and c:
            out.append(MatchedSet(t, c))
    return out


def _flatten(sets):
    ids, treated = [], []
    for ms in sets:
        ids += list(ms.treated_ids) + list(ms.control_ids)
        treated += [1.0] * len(ms.treated_ids) + [0.0] * len(ms.control_ids)
    return ids, np.array(treated)


def _regression_test(y, exposure, labels, covariates, names, level, label, method, n_t, n_c,
                     n_sets):
    cols = [exposure] + ([covariates] if covariates is not None and covariates.size else [])
    X = np.column_stack(cols)
    xnames = ["treatment"] + list(names or [])
    design = DesignMatrix(X, y, names=xnames, strata=labels)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_ols(design, absorb_strata=True)
    if "treatment" not in fit.names:
        raise NumericalError("treatment column is collinear with the matched-set effects")
    est, se, df = fit.coef("treatment"), fit.se("treatment"), fit.df_resid
    if se > 0:
        tstat = est / se
        p = float(2.0 * stats.t.sf(abs(tstat), df))
    else:
        tstat = math.copysign(math.inf, est) if est else 0.0
        p = 1.0 if est == 0 else 0.0
    half = stats.t.ppf(0.5 + level / 2.0, df) * se
    return TestResult(label, est, est - half, est + half, min(1.0, p), n_t, n_c, n_sets, se,
                      tstat, df, level, method,
                      {"dropped_covariates": fit.dropped,
                       "warnings": [str(w.message) for w in caught]})


def matched_adjusted_test(outcome, sets, covariates=None, covariate_names=None, level=0.95,
                          label="", dose=None):
    """OLS with matched-set fixed effects, covariates and a treatment column.

    ``outcome``, ``covariates`` and ``dose`` are callables taking a list of
    subject ids and returning an array in that order. The treatment column is
    the 0/1 indicator, or ``dose(ids)`` when a dose is given.
    """
    sets = list(sets)
    if not sets:
        raise DataError("no matched sets to analyse")
    ids, treated = _flatten(sets)
    y = np.asarray(outcome(ids), dtype=float)
    if np.isnan(y).any():
        raise DataError(f"{int(np.isnan(y).sum())} matched subject(s) have a missing outcome")
    X = None if covariates is None else np.asarray(covariates(ids), dtype=float)
    labels = set_labels(sets, ids)
    exposure = treated
    method = "set fixed-effects OLS"
    if dose is not None:
        exposure = np.asarray(dose(ids), dtype=float)
        if np.any(exposure[treated == 1] < 1):
            raise DataError("every treated subject needs a dose of at least 1")
        if np.any(exposure[treated == 0] != 0):
            raise DataError("controls must have dose 0")
        method = "set fixed-effects OLS, dose regressor"
    return _regression_test(y, exposure, labels, X, covariate_names, level, label, method,
                            int(treated.sum()), int((1 - treated).sum()), len(sets))


def dose_scaled_test(outcome, sets, covariates, covariate_names, dose, level=0.95, label=""):
    """Per-year effect: the matched regression with years of football as the regressor."""
    res = matched_adjusted_test(outcome, sets, covariates, covariate_names, level, label, dose=dose)
    res.notes["dose_reading"] = "years entered as a regressor, not as a response rescaling"
    return res


def matched_logistic_test(outcome, sets, covariates=None, covariate_names=None, level=0.95,
                          label=""):
    """Conditional logistic regression of a binary outcome given matched sets."""
    sets = list(sets)
    ids, treated = _flatten(sets)
    y = np.asarray(outcome(ids), dtype=float)
    if np.isnan(y).any():
        raise DataError("binary outcome missing for matched subjects")
    cols = [treated]
    names = ["treatment"]
    if covariates is not None:
        cols.append(np.asarray(covariates(ids), dtype=float))
        names += list(covariate_names)
    design = DesignMatrix(np.column_stack(cols), y, names=names, strata=set_labels(sets, ids))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_conditional_logistic(design)
    est, se = fit.coef("treatment"), fit.se("treatment")
    zstat = est / se
    p = float(2.0 * stats.norm.sf(abs(zstat)))
    half = stats.norm.ppf(0.5 + level / 2.0) * se
    return TestResult(label, est, est - half, est + half, p, int(treated.sum()),
                      int((1 - treated).sum()), len(sets), se, zstat, math.inf, level,
                      "conditional logistic (log odds ratio)",
                      {"dropped_covariates": fit.dropped,
                       "uninformative_sets": fit.n_strata_dropped,
                       "warnings": [str(w.message) for w in caught]})


# Mantel-Haenszel ---------------------------------------------------------------

def tables_from_sets(sets, indicator):
    """One 2x2 table per set: rows (treated, control), columns (event, no event)."""
    tables = []
    for ms in sets:
        yt = np.asarray(indicator(list(ms.treated_ids)), dtype=float)
        yc = np.asarray(indicator(list(ms.control_ids)), dtype=float)
        if np.isnan(yt).any() or np.isnan(yc).any():
            continue
        a, c = int(yt.sum()), int(yc.sum())
        tables.append(np.array([[a, len(yt) - a], [c, len(yc) - c]], dtype=np.int64))
    return tables


def informative(tables):
    out = []
    for t in tables:
        t = np.asarray(t)
        if np.any(t < 0):
            raise ValueError("table cells must be nonnegative")
        if t.sum(axis=1).min() > 0 and t.sum(axis=0).min() > 0:
            out.append(t)
    return out


def mh_moments(tables):
    """Null mean and variance of each table's top-left cell."""
    T = np.array(tables, dtype=float).reshape(-1, 2, 2)
    n1 = T[:, 0].sum(axis=1)
    n0 = T[:, 1].sum(axis=1)
    m1 = T[:, :, 0].sum(axis=1)
    N = n1 + n0
    m0 = N - m1
    mean = n1 * m1 / N
    var = n1 * n0 * m1 * m0 / (N * N * (N - 1))
    return T[:, 0, 0], mean, var


def mantel_haenszel_test(tables, level=0.95, label=""):
    """MH test (no continuity correction) with the common odds ratio.

    The odds-ratio interval uses the Robins-Breslow-Greenland variance.
    """
    tabs = informative(tables)
    if not tabs:
        raise DataError("no informative 2x2 tables (every table has an empty margin)")
    a, mean, var = mh_moments(tabs)
    dev = float(a.sum() - mean.sum())
    v = float(var.sum())
    z = dev / math.sqrt(v) if v > 0 else 0.0
    p = float(2.0 * stats.norm.sf(abs(z))) if v > 0 else 1.0
    T = np.array(tabs, dtype=float)
    A, B, C, D = T[:, 0, 0], T[:, 0, 1], T[:, 1, 0], T[:, 1, 1]
    N = T.sum(axis=(1, 2))
    R, S = A * D / N, B * C / N
    P, Q = (A + D) / N, (B + C) / N
    sr, ss = R.sum(), S.sum()
    if sr > 0 and ss > 0:
        est = sr / ss
        var_log = (P * R).sum() / (2 * sr ** 2) + (P * S + Q * R).sum() / (2 * sr * ss) \
            + (Q * S).sum() / (2 * ss ** 2)
        half = stats.norm.ppf(0.5 + level / 2.0) * math.sqrt(var_log)
        lo, hi = est * math.exp(-half), est * math.exp(half)
        se = math.sqrt(var_log)
    else:
        est = math.inf if ss == 0 and sr > 0 else (0.0 if sr == 0 and ss > 0 else 1.0)
        lo, hi, se = (0.0, math.inf, math.nan)
        lo = min(lo, est)
    n_t = int(T[:, 0].sum())
    n_c = int(T[:, 1].sum())
    return TestResult(label, float(est), float(lo), float(hi), p, n_t, n_c, len(tabs), se,
                      z * z, math.inf, level, "Mantel-Haenszel",
                      {"z": z, "observed": float(a.sum()), "expected": float(mean.sum()),
                       "variance": v, "tables_dropped": len(tables) - len(tabs),
                       "estimate_scale": "common odds ratio"})


# equivalence -------------------------------------------------------------------

def equivalence_test(result, margin, label=None):
    """Two one-sided t-tests of ``|effect| < margin`` on a regression result."""
    if not margin > 0:
        raise ValueError(f"equivalence margin must be positive, got {margin}")
    est, se, df = result.estimate, result.se, result.df
    if not se > 0:
        p_lo = 0.0 if est > -margin else 1.0
        p_hi = 0.0 if est < margin else 1.0
    else:
        p_lo = float(stats.t.sf((est + margin) / se, df))
        p_hi = float(stats.t.cdf((est - margin) / se, df))
    p = max(p_lo, p_hi)
    return TestResult(label or result.label, est, result.ci_low, result.ci_high, p,
                      result.n_treated, result.n_control, result.n_sets, se, result.statistic,
                      df, result.level, "TOST equivalence",
                      {"margin": margin, "p_lower": p_lo, "p_upper": p_hi})


def default_margin(stage2a, stage2b):
    """Smaller magnitude of the two treated-vs-control estimates."""
    m = min(abs(stage2a.estimate), abs(stage2b.estimate))
    if not m > 0:
        raise NumericalError("default equivalence margin is zero; supply a margin")
    return m


# attrition ---------------------------------------------------------------------

@dataclass
class AttritionResult:
    component: str
    coefficient: float
    se: float
    p_value: float
    flagged: bool
    n_available: int
    n_total: int
    fit: object = None
    note: str = ""

    def to_dict(self):
        num = lambda x: None if not math.isfinite(x) else x  # noqa: E731
        return {"component": self.component, "football_coefficient": num(self.coefficient),
                "se": num(self.se), "p_value": num(self.p_value), "flagged": self.flagged,
                "n_available": self.n_available, "n_total": self.n_total, "note": self.note}


def attrition_check(study, wave, alpha=0.05, components=PRIMARY_COMPONENTS):
    """Logistic models of component availability on covariates plus football status."""
    football = (study.arms == ArmLabel.FOOTBALL.value).astype(float)
    X = np.column_stack([np.ones(len(study.ids)), study.X, football])
    names = ["(intercept)"] + list(study.covariate_names) + ["football"]
    out = []
    for comp in components:
        avail = (~np.isnan(study.outcome(comp, wave))).astype(float)
        if avail.min() == avail.max():
            state = "observed" if avail[0] else "missing"
            out.append(AttritionResult(comp, math.nan, math.nan, math.nan, False,
                                       int(avail.sum()), len(avail),
                                       note=f"{comp} {state} for everyone; model not fitted"))
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_logistic(DesignMatrix(X, avail, names=names))
        if "football" not in fit.names:
            raise NumericalError(f"football indicator collinear in the {comp} attrition model")
        p = fit.p_value("football")
        out.append(AttritionResult(comp, fit.coef("football"), fit.se("football"), p, p < alpha,
                                   int(avail.sum()), len(avail), fit))
    return out
