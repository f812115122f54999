"""Sensitivity to hidden bias: worst-case p-values over a Gamma grid.

Continuous outcomes use the Huber-Maritz M-statistic without trimming on
covariance-adjusted residuals, bounded with the separable approximation.
Binary outcomes use Mantel-Haenszel bounds from the extended hypergeometric
distribution.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DataError, MonotonicityError, NumericalError
from .glm import DesignMatrix, fit_ols
from .inference import informative, mh_moments

GAMMA_CAP = 20.0
GAMMA_RESOLUTION = 0.01
DEFAULT_GRID = (1.0, 1.25, 1.5, 2.0, 3.0)


@dataclass(frozen=True)
class GammaSpec:
    gamma: float = 1.0
    grid: tuple = DEFAULT_GRID

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be at least 1")
        grid = tuple(float(g) for g in self.grid)
        if not grid or grid[0] != 1.0 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("grid must be ascending and start at 1")
        object.__setattr__(self, "grid", grid)


@dataclass
class ScoredSet:
    values: np.ndarray
    treated: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.treated = np.asarray(self.treated, dtype=bool)
        n_t = int(self.treated.sum())
        if len(self.values) < 2 or n_t == 0 or n_t == len(self.values):
            raise ValueError("a scored set needs two or more members on both sides")
        if n_t > 1 and len(self.values) - n_t > 1:
            raise ValueError("a scored set must have a single treated or a single control")

    @property
    def size(self):
        return len(self.values)


@dataclass
class SensitivityResult:
    outcome: str
    grid: list
    p_upper: list
    gamma_star: float
    flag: str
    level: float
    method: str
    alternative: str = "greater"
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {"outcome": self.outcome, "method": self.method, "alternative": self.alternative,
                "level": self.level, "grid": list(self.grid),
                "p_upper": [float(p) for p in self.p_upper],
                "gamma_star": self.gamma_star, "flag": self.flag, "notes": self.notes}


# covariance adjustment -----------------------------------------------------------

def covariance_adjust(outcome, covariates, sets):
    """Residuals of the outcome regressed on covariates (with intercept), grouped by set.

    ``outcome`` and ``covariates`` are callables taking a list of ids.
    """
    sets = list(sets)
    ids, treated = [], []
    for ms in sets:
        ids += list(ms.treated_ids) + list(ms.control_ids)
        treated += [True] * len(ms.treated_ids) + [False] * len(ms.control_ids)
    y = np.asarray(outcome(ids), dtype=float)
    if np.isnan(y).any():
        raise DataError("outcome missing for matched subjects")
    cols = [np.ones(len(ids))]
    if covariates is not None:
        cols.append(np.asarray(covariates(ids), dtype=float))
    X = np.column_stack(cols)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_ols(DesignMatrix(X, y))
    resid = fit.residuals
    # rounding noise from an exact fit is not a within-set difference
    resid = np.where(np.abs(resid) <= 1e-10 * max(1.0, float(np.abs(y).max())), 0.0, resid)
    out, k = [], 0
    for ms in sets:
        n = len(ms.treated_ids) + len(ms.control_ids)
        out.append(ScoredSet(resid[k:k + n], np.array(treated[k:k + n])))
        k += n
    return out


# M-test --------------------------------------------------------------------------

def _oriented(sets, alternative):
    """(values, index of the singleton) per set, flipped so large means 'treated higher'."""
    sign = {"greater": 1.0, "less": -1.0}.get(alternative)
    if sign is None:
        raise ValueError("alternative must be 'greater' or 'less'")
    out = []
    for s in sets:
        v = sign * s.values
        if s.treated.sum() == 1:
            out.append((v, int(np.flatnonzero(s.treated)[0])))
        else:
            # k treated and one control: the control plays the singleton, sign reversed
            out.append((-v, int(np.flatnonzero(~s.treated)[0])))
    return out


def m_scores(sets, alternative="greater"):
    """Identity-psi M-scores per set and the observed statistic.

    Score of member j in a set of size J: ``(J / (J - 1)) (y_j - ybar) / h``
    with ``h`` the median absolute within-set pairwise difference.
    """
    oriented = _oriented(sets, alternative)
    if len(oriented) < 2:
        raise DataError("the M-test needs at least two matched sets")
    diffs = np.concatenate([np.abs(v[:, None] - v[None, :])[~np.eye(len(v), dtype=bool)]
                            for v, _ in oriented])
    h = float(np.median(diffs))
    if not h > 0:
        raise NumericalError("median absolute within-set difference is zero")
    scores, stat = [], 0.0
    for v, k in oriented:
        J = len(v)
        q = (J / (J - 1.0)) * (v - v.mean()) / h
        scores.append(q)
        stat += q[k]
    return scores, stat, h


def separable_moments(q, gamma):
    """Worst-case null mean and variance of one set's treated score.

    With scores sorted ascending, the candidate distributions put odds
    ``gamma`` on the top ``J - a`` members; the one maximising the mean
    (then the variance) is kept.
    """
    q = np.sort(np.asarray(q, dtype=float))
    J = len(q)
    if gamma == 1.0:
        mu = q.mean()
        return mu, (q * q).mean() - mu * mu
    best_mu, best_var = -math.inf, -math.inf
    cs1 = np.cumsum(q)
    cs2 = np.cumsum(q * q)
    tot1, tot2 = cs1[-1], cs2[-1]
    for a in range(1, J):
        lo1, lo2 = cs1[a - 1], cs2[a - 1]
        denom = a + gamma * (J - a)
        mu = (lo1 + gamma * (tot1 - lo1)) / denom
        var = (lo2 + gamma * (tot2 - lo2)) / denom - mu * mu
        if mu > best_mu + 1e-15 or (abs(mu - best_mu) <= 1e-15 and var > best_var):
            best_mu, best_var = mu, var
    return best_mu, max(best_var, 0.0)


def m_test_deviate(sets, gamma, alternative="greater", scored=None):
    scores, stat, _ = scored if scored is not None else m_scores(sets, alternative)
    mu = var = 0.0
    for q in scores:
        m, v = separable_moments(q, gamma)
        mu += m
        var += v
    if not var > 0:
        raise NumericalError("null variance of the M-statistic is zero")
    return (stat - mu) / math.sqrt(var)


def m_test_upper_bound(sets, spec=GammaSpec(), alternative="greater"):
    """Upper-bound one-sided p-values at each grid point (normal approximation)."""
    scored = m_scores(sets, alternative)
    ps = [float(stats.norm.sf(m_test_deviate(sets, g, alternative, scored))) for g in spec.grid]
    _assert_monotone(spec.grid, ps)
    return ps


# Mantel-Haenszel ------------------------------------------------------------------

def extended_hypergeometric_moments(n1, m1, N, odds):
    """Mean and variance of the top-left cell with fixed margins and odds ratio ``odds``."""
    n0, m0 = N - n1, N - m1
    lo, hi = max(0, n1 - m0), min(n1, m1)
    x = np.arange(lo, hi + 1)
    logw = (special.gammaln(m1 + 1) - special.gammaln(x + 1) - special.gammaln(m1 - x + 1)
            + special.gammaln(m0 + 1) - special.gammaln(n1 - x + 1)
            - special.gammaln(m0 - n1 + x + 1) + x * math.log(odds))
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = float((w * x).sum())
    return mean, float((w * (x - mean) ** 2).sum())


def _orient_tables(tables, alternative):
    if alternative == "greater":
        return [np.asarray(t) for t in tables]
    if alternative == "less":
        return [np.asarray(t)[:, ::-1] for t in tables]
    raise ValueError("alternative must be 'greater' or 'less'")


def mh_deviate(tables, gamma, alternative="greater"):
    tabs = informative(_orient_tables(tables, alternative))
    if not tabs:
        raise DataError("no informative 2x2 tables")
    if gamma == 1.0:
        a, mean, var = mh_moments(tabs)
        return float((a.sum() - mean.sum()) / math.sqrt(var.sum()))
    obs = mu = var = 0.0
    for t in tabs:
        n1 = int(t[0].sum())
        m1 = int(t[:, 0].sum())
        m, v = extended_hypergeometric_moments(n1, m1, int(t.sum()), gamma)
        obs += t[0, 0]
        mu += m
        var += v
    return (obs - mu) / math.sqrt(var)


def mh_upper_bound(tables, spec=GammaSpec(), alternative="greater"):
    ps = [float(stats.norm.sf(mh_deviate(tables, g, alternative))) for g in spec.grid]
    _assert_monotone(spec.grid, ps)
    return ps


# breakdown Gamma ------------------------------------------------------------------

def _assert_monotone(gammas, ps, tol=1e-12):
    pairs = sorted(zip(gammas, ps))
    for (g0, p0), (g1, p1) in zip(pairs, pairs[1:]):
        if p1 < p0 - tol:
            raise MonotonicityError(
                f"upper-bound p decreased from {p0:.6g} at gamma {g0:g} to {p1:.6g} at {g1:g}")


def find_gamma_star(bound, level, cap=GAMMA_CAP, resolution=GAMMA_RESOLUTION):
    """Largest Gamma in [1, cap] whose upper-bound p stays at or below ``level``.

    Returns ``(gamma_star, flag)`` where flag is ``""``,
    ``"sensitive at gamma=1"`` (gamma_star None) or ``"exceeds search cap"``.
    """
    seen = {}

    def p(g):
        if g not in seen:
            seen[g] = float(bound(g))
            _assert_monotone(list(seen), list(seen.values()))
        return seen[g]

    if p(1.0) > level:
        return None, "sensitive at gamma=1"
    if p(cap) <= level:
        return cap, "exceeds search cap"
    lo, hi = 1.0, cap
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if p(mid) <= level:
            lo = mid
        else:
            hi = mid
    return math.floor(lo * 100 + 1e-9) / 100, ""


def m_test_sensitivity(label, sets, level, spec=GammaSpec(), alternative="greater"):
    scored = m_scores(sets, alternative)

    def bound(g):
        return stats.norm.sf(m_test_deviate(sets, g, alternative, scored))

    ps = [float(bound(g)) for g in spec.grid]
    _assert_monotone(spec.grid, ps)
    gstar, flag = find_gamma_star(bound, level)
    return SensitivityResult(label, list(spec.grid), ps, gstar, flag, level,
                             "M-test, identity psi (no trimming), separable approximation",
                             alternative, {"scale": scored[2], "n_sets": len(sets)})


def mh_sensitivity(label, tables, level, spec=GammaSpec(), alternative="greater"):
    def bound(g):
        return stats.norm.sf(mh_deviate(tables, g, alternative))

    ps = [float(bound(g)) for g in spec.grid]
    _assert_monotone(spec.grid, ps)
    gstar, flag = find_gamma_star(bound, level)
    return SensitivityResult(label, list(spec.grid), ps, gstar, flag, level,
                             "Mantel-Haenszel, extended hypergeometric bounds", alternative,
                             {"n_tables": len(informative(tables))})


def format_sensitivity_table(results, delimiter="\t"):
    if not results:
        return "Outcome" + delimiter + "Gamma*\n"
    grid = results[0].grid
    lines = [delimiter.join(["Outcome"] + [f"G={g:g}" for g in grid] + ["Gamma*"])]
    for r in results:
        star = r.flag if r.gamma_star is None else f"{r.gamma_star:.2f}" + \
            (" (cap)" if r.flag else "")
        lines.append(delimiter.join([r.outcome] + [f"{p:.4f}" for p in r.p_upper] + [star]))
    return "\n".join(lines) + "\n"
