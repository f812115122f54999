"""Gaussian and binomial GLM fitting: OLS, IRLS logistic, conditional logistic.

All fits prune collinear columns deterministically: a column is dropped when
it lies in the span of the columns before it, so later-indexed columns go
first.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DegenerateResponseError, NumericalError, RankDeficiencyError, SeparationError

MAX_ITER = 50
COEF_TOL = 1e-8
SEPARATION_BOUND = 15.0
COLLINEAR_TOL = 1e-9


@dataclass
class DesignMatrix:
    X: np.ndarray
    response: np.ndarray
    names: list = None
    strata: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.response = np.asarray(self.response, dtype=float)
        n, p = self.X.shape
        if p < 1:
            raise ValueError("design needs at least one column")
        if self.response.shape != (n,):
            raise ValueError(f"response length {self.response.shape} does not match {n} rows")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.response)):
            raise ValueError("design contains missing or non-finite entries")
        if self.names is None:
            self.names = [f"x{k}" for k in range(p)]
        self.names = list(self.names)
        if len(self.names) != p:
            raise ValueError("one name per column required")
        if self.strata is not None:
            self.strata = np.asarray(self.strata)
            if self.strata.shape != (n,):
                raise ValueError("strata labels must have one entry per row")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (n,) or np.any(self.weights < 0):
                raise ValueError("weights must be nonnegative, one per row")


@dataclass
class GlmFit:
    names: list
    coefficients: np.ndarray
    standard_errors: np.ndarray
    converged: bool
    iterations: int
    residuals: np.ndarray
    family: str
    log_likelihood: float = math.nan
    rss: float = math.nan
    df_resid: int = 0
    dropped: list = field(default_factory=list)
    history: list = field(default_factory=list)
    n_obs: int = 0
    n_strata_dropped: int = 0

    def index(self, name):
        return self.names.index(name)

    def coef(self, name):
        return float(self.coefficients[self.index(name)])

    def se(self, name):
        return float(self.standard_errors[self.index(name)])

    @property
    def statistics(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.standard_errors

    @property
    def p_values(self):
        z = np.abs(self.statistics)
        if self.family == "gaussian":
            return 2.0 * stats.t.sf(z, self.df_resid)
        return 2.0 * stats.norm.sf(z)

    def p_value(self, name):
        return float(self.p_values[self.index(name)])

    def summary(self):
        return {
            "family": self.family,
            "coefficients": dict(zip(self.names, map(float, self.coefficients))),
            "standard_errors": dict(zip(self.names, map(float, self.standard_errors))),
            "p_values": dict(zip(self.names, map(float, self.p_values))),
            "converged": self.converged,
            "iterations": self.iterations,
            "dropped": list(self.dropped),
            "n_obs": self.n_obs,
        }


def independent_columns(X, tol=COLLINEAR_TOL):
    """Indices of columns not in the span of earlier columns (index order).

    The diagonal of the unpivoted R factor is the norm of each column's
    component orthogonal to all earlier columns.
    """
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    live = np.flatnonzero(norms > tol)
    if live.size == 0:
        return []
    R = np.linalg.qr(X[:, live] / norms[live], mode="r")
    diag = np.abs(np.diag(R))
    keep = [int(k) for k, r in zip(live, diag) if r > math.sqrt(tol)]
    if len(keep) < len(live):
        # a dropped column still perturbs later diagonals; re-check on the kept set
        R = np.linalg.qr(X[:, keep] / norms[keep], mode="r")
        keep = [k for k, r in zip(keep, np.abs(np.diag(R))) if r > math.sqrt(tol)]
    return keep


def _prune(design, X=None):
    X = design.X if X is None else X
    keep = independent_columns(X)
    dropped = [design.names[k] for k in range(X.shape[1]) if k not in keep]
    if dropped:
        warnings.warn(f"dropping collinear column(s): {dropped}", stacklevel=3)
    return keep, dropped


def _col_scale(X):
    sd = X.std(axis=0)
    const = sd < 1e-12
    return np.where(const, np.abs(X).max(axis=0).clip(min=1.0), sd)


def _logistic_loglik(X, y, w, beta):
    eta = X @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(design):
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Converges when the largest absolute coefficient change drops below
    1e-8, or stops after 50 iterations. Standard errors come from the
    observed information at the final estimate.
    """
    y = design.response
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    w = np.ones_like(y) if design.weights is None else design.weights
    if np.all(y[w > 0] == y[w > 0][0]):
        raise DegenerateResponseError("response is constant; logistic fit is undefined")
    keep, dropped = _prune(design)
    X = design.X[:, keep]
    names = [design.names[k] for k in keep]
    scale = _col_scale(X)
    beta = np.zeros(X.shape[1])
    ll = _logistic_loglik(X, y, w, beta)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        eta = X @ beta
        mu = special.expit(eta)
        W = w * mu * (1.0 - mu)
        H = X.T @ (W[:, None] * X)
        g = X.T @ (w * (y - mu))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        new = beta + step
        new_ll = _logistic_loglik(X, y, w, new)
        while new_ll < ll - 1e-12 * max(1.0, abs(ll)) and t > 1e-6:
            t *= 0.5
            new = beta + t * step
            new_ll = _logistic_loglik(X, y, w, new)
        if new_ll < ll - 1e-12 * max(1.0, abs(ll)):
            converged = bool(np.max(np.abs(g)) < 1e-6)
            break
        delta = np.max(np.abs(new - beta))
        beta, ll = new, new_ll
        history.append(ll)
        std_beta = np.abs(beta * scale)
        if np.max(std_beta) > SEPARATION_BOUND and t == 1.0 and np.max(np.abs(t * step) * scale) > 1e-3:
            worst = names[int(np.argmax(std_beta))]
            raise SeparationError(
                f"perfect separation: standardized coefficient for {worst!r} exceeds "
                f"{SEPARATION_BOUND} and is still growing")
        if delta < COEF_TOL:
            converged = True
            break
    mu = special.expit(X @ beta)
    W = w * mu * (1.0 - mu)
    H = X.T @ (W[:, None] * X)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise NumericalError("information matrix is singular at the logistic estimate") from None
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return GlmFit(names=names, coefficients=beta, standard_errors=se, converged=converged,
                  iterations=it, residuals=y - mu, family="binomial", log_likelihood=ll,
                  df_resid=int(X.shape[0] - X.shape[1]), dropped=dropped, history=history,
                  n_obs=int(X.shape[0]))


def demean_within(values, groups):
    """Subtract group means (rows of a 1-D or 2-D array) within each group."""
    values = np.asarray(values, dtype=float)
    codes, inv = np.unique(groups, return_inverse=True)
    counts = np.bincount(inv, minlength=len(codes)).astype(float)
    if values.ndim == 1:
        sums = np.bincount(inv, weights=values, minlength=len(codes))
        return values - (sums / counts)[inv]
    out = np.empty_like(values)
    for k in range(values.shape[1]):
        sums = np.bincount(inv, weights=values[:, k], minlength=len(codes))
        out[:, k] = values[:, k] - (sums / counts)[inv]
    return out


def fit_ols(design, absorb_strata=False):
    """Least squares with t-based inference.

    With ``absorb_strata`` the stratum fixed effects are swept out by
    within-stratum demeaning instead of explicit dummy columns; the residual
    degrees of freedom account for the absorbed levels.
    """
    y = design.response
    X = design.X
    n_absorbed = 0
    if absorb_strata:
        if design.strata is None:
            raise ValueError("absorb_strata requires strata labels")
        if design.weights is not None:
            raise ValueError("weighted demeaning is not supported")
        n_absorbed = len(np.unique(design.strata))
        y = demean_within(y, design.strata)
        X = demean_within(X, design.strata)
    keep, dropped = _prune(design, X)
    Xk = X[:, keep]
    names = [design.names[k] for k in keep]
    n, p = Xk.shape
    df = n - p - n_absorbed
    if p == 0 or df <= 0:
        raise RankDeficiencyError(
            f"no residual degrees of freedom ({n} rows, {p} columns, {n_absorbed} absorbed); "
            f"dropped columns: {dropped}", columns=dropped)
    if design.weights is not None:
        sw = np.sqrt(design.weights)
        Xw, yw = Xk * sw[:, None], y * sw
    else:
        Xw, yw = Xk, y
    Q, R = np.linalg.qr(Xw)
    beta = np.linalg.solve(R, Q.T @ yw)
    resid = yw - Xw @ beta
    rss = float(resid @ resid)
    sigma2 = rss / df
    Rinv = np.linalg.solve(R, np.eye(p))
    cov = sigma2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return GlmFit(names=names, coefficients=beta, standard_errors=se, converged=True,
                  iterations=1, residuals=y - Xk @ beta, family="gaussian", rss=rss,
                  df_resid=int(df), dropped=dropped, n_obs=int(n))


def add_stratum_dummies(design):
    """Explicit-dummies design: intercept, one indicator per stratum, then X."""
    levels, inv = np.unique(design.strata, return_inverse=True)
    D = np.zeros((len(inv), len(levels)))
    D[np.arange(len(inv)), inv] = 1.0
    X = np.column_stack([np.ones(len(inv)), D, design.X])
    names = ["(intercept)"] + [f"stratum[{lv}]" for lv in levels] + list(design.names)
    return DesignMatrix(X, design.response, names=names)


# conditional logistic ------------------------------------------------------

class _StratumGroup:
    """Strata sharing (size, number of cases), evaluated by subset enumeration."""

    def __init__(self, Xs, ys):
        n, k = Xs.shape[1], int(ys[0].sum())
        self.combos = np.array(list(itertools.combinations(range(n), k)), dtype=np.intp)
        # sufficient statistic of every candidate case set: (G, m, p)
        self.S = Xs[:, self.combos, :].sum(axis=2)
        self.s_obs = np.einsum("gi,gip->gp", ys, Xs)

    def evaluate(self, beta):
        eta = self.S @ beta
        top = eta.max(axis=1, keepdims=True)
        w = np.exp(eta - top)
        Z = w.sum(axis=1)
        P = w / Z[:, None]
        mean = np.einsum("gm,gmp->gp", P, self.S)
        second = np.einsum("gm,gmp,gmq->pq", P, self.S, self.S)
        ll = float(np.sum(self.s_obs @ beta - (np.log(Z) + top[:, 0])))
        grad = (self.s_obs - mean).sum(axis=0)
        hess = second - mean.T @ mean
        return ll, grad, hess


class _StratumDP:
    """One large stratum, evaluated by the elementary-symmetric recursion."""

    def __init__(self, X, y):
        self.X, self.k = X, int(y.sum())
        self.s_obs = y @ X

    def evaluate(self, beta):
        X, K = self.X, self.k
        p = X.shape[1]
        eta = X @ beta
        top = eta.max()
        w = np.exp(eta - top)
        Z = np.zeros(K + 1)
        G = np.zeros((K + 1, p))
        H = np.zeros((K + 1, p, p))
        Z[0] = 1.0
        for i in range(X.shape[0]):
            x = X[i]
            for k in range(min(i + 1, K), 0, -1):
                H[k] += w[i] * (H[k - 1] + np.outer(x, G[k - 1]) + np.outer(G[k - 1], x)
                                + np.outer(x, x) * Z[k - 1])
                G[k] += w[i] * (G[k - 1] + x * Z[k - 1])
                Z[k] += w[i] * Z[k - 1]
        mean = G[K] / Z[K]
        ll = float(self.s_obs @ beta - (math.log(Z[K]) + K * top))
        return ll, self.s_obs - mean, H[K] / Z[K] - np.outer(mean, mean)


def fit_conditional_logistic(design, max_enumeration=5000):
    """Conditional logistic regression with strata as conditioning sets.

    Each stratum's likelihood conditions on its number of cases, which
    eliminates per-stratum intercepts. Strata with fewer than two members or
    without both outcome values carry no information and are dropped (count
    reported in ``n_strata_dropped``). Predictors constant within every
    stratum are eliminated by the conditioning and dropped with a warning.
    """
    if design.strata is None:
        raise ValueError("conditional logistic regression needs strata")
    y = design.response
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("conditional logistic response must be 0/1")
    labels, inv = np.unique(design.strata, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(labels) + 1))
    informative = []
    for g in range(len(labels)):
        rows = order[bounds[g]:bounds[g + 1]]
        k = y[rows].sum()
        if len(rows) >= 2 and 0 < k < len(rows):
            informative.append(rows)
    n_dropped = len(labels) - len(informative)
    if not informative:
        raise DegenerateResponseError("no informative strata: every stratum has a single "
                                      "outcome value")
    used = np.concatenate(informative)
    Xd = demean_within(design.X[used], design.strata[used])
    keep, dropped = _prune(design, Xd)
    if not keep:
        raise RankDeficiencyError("every predictor is constant within strata", columns=dropped)
    X = design.X[:, keep]
    names = [design.names[k] for k in keep]
    p = X.shape[1]

    buckets = {}
    evaluators = []
    for rows in informative:
        n, k = len(rows), int(y[rows].sum())
        if math.comb(n, k) <= max_enumeration:
            buckets.setdefault((n, k), []).append(rows)
        else:
            evaluators.append(_StratumDP(X[rows], y[rows]))
    for (n, k), groups in sorted(buckets.items()):
        idx = np.array(groups)
        evaluators.append(_StratumGroup(X[idx], y[idx]))

    def evaluate(beta):
        ll, grad, hess = 0.0, np.zeros(p), np.zeros((p, p))
        for ev in evaluators:
            a, b, c = ev.evaluate(beta)
            ll += a
            grad += b
            hess += c
        return ll, grad, hess

    scale = _col_scale(Xd[:, keep])
    beta = np.zeros(p)
    ll, grad, hess = evaluate(beta)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        new = beta + step
        new_ll, new_grad, new_hess = evaluate(new)
        while new_ll < ll - 1e-12 * max(1.0, abs(ll)) and t > 1e-6:
            t *= 0.5
            new = beta + t * step
            new_ll, new_grad, new_hess = evaluate(new)
        if new_ll < ll - 1e-12 * max(1.0, abs(ll)):
            converged = bool(np.max(np.abs(grad)) < 1e-6)
            break
        delta = np.max(np.abs(new - beta))
        beta, ll, grad, hess = new, new_ll, new_grad, new_hess
        history.append(ll)
        std_beta = np.abs(beta * scale)
        if np.max(std_beta) > SEPARATION_BOUND and t == 1.0 and np.max(np.abs(t * step) * scale) > 1e-3:
            worst = names[int(np.argmax(std_beta))]
            raise SeparationError(f"conditional likelihood has no finite maximum: "
                                  f"coefficient for {worst!r} diverges")
        if delta < COEF_TOL:
            converged = True
            break
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        raise NumericalError("conditional information matrix is singular") from None
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return GlmFit(names=names, coefficients=beta, standard_errors=se, converged=converged,
                  iterations=it, residuals=np.zeros(0), family="conditional-binomial",
                  log_likelihood=ll, df_resid=int(len(used) - p), dropped=dropped,
                  history=history, n_obs=int(len(used)), n_strata_dropped=n_dropped)
