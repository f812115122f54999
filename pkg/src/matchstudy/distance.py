"""Rank-based robust Mahalanobis distances and a soft propensity caliper."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special, stats
from scipy.spatial.distance import cdist

from .glm import DesignMatrix, fit_logistic

COST_RESOLUTION = 1e-6


@dataclass
class PropensityModel:
    fit: object
    ids: list
    scores: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self._pos = {s: k for k, s in enumerate(self.ids)}

    @property
    def logit_sd(self):
        if len(self.logits) < 2:
            return 0.0
        return float(np.std(self.logits, ddof=1))

    def logit_of(self, ids):
        return self.logits[[self._pos[s] for s in ids]]


def fit_propensity(X, treated, ids, names=None):
    """Logistic propensity model ``P(treated | x)`` with an intercept."""
    X = np.asarray(X, dtype=float)
    names = list(names) if names is not None else [f"x{k}" for k in range(X.shape[1])]
    design = DesignMatrix(np.column_stack([np.ones(len(X)), X]),
                          np.asarray(treated, dtype=float), names=["(intercept)"] + names)
    fit = fit_logistic(design)
    keep = [design.names.index(n) for n in fit.names]
    eta = design.X[:, keep] @ fit.coefficients
    scores = special.expit(eta)
    # keep scores strictly inside (0, 1) so the logit stays finite
    scores = np.clip(scores, 1e-12, 1.0 - 1e-12)
    return PropensityModel(fit=fit, ids=list(ids), scores=scores, logits=special.logit(scores))


@dataclass(frozen=True)
class CaliperSpec:
    width_in_sd: float = 0.2
    penalty_per_sd: float = None
    penalty_multiplier: float = 1000.0

    def __post_init__(self):
        if self.width_in_sd < 0:
            raise ValueError("caliper width must be nonnegative")
        if self.penalty_per_sd is not None and self.penalty_per_sd <= 0:
            raise ValueError("caliper penalty must be positive")

    def resolve_penalty(self, dist):
        if self.penalty_per_sd is not None:
            return float(self.penalty_per_sd)
        finite = dist.values[np.isfinite(dist.values)]
        mean = float(finite.mean()) if finite.size else 0.0
        return self.penalty_multiplier * mean if mean > 0 else self.penalty_multiplier


@dataclass
class DistanceMatrix:
    row_ids: list
    col_ids: list
    values: np.ndarray
    penalty_per_sd: float = 0.0
    n_penalized: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("distance values do not match the id lists")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("distances must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def transpose(self):
        return DistanceMatrix(list(self.col_ids), list(self.row_ids), self.values.T.copy(),
                              self.penalty_per_sd, self.n_penalized)

    def integer_costs(self, resolution=COST_RESOLUTION):
        scaled = np.rint(self.values / resolution)
        if scaled.size and scaled.max() > 2.0 ** 52 / max(1, sum(self.shape)):
            raise OverflowError("distances too large for exact integer flow arithmetic")
        return scaled.astype(np.int64)

    def write_table(self, path, delimiter=","):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["id"] + list(self.col_ids))
            for rid, row in zip(self.row_ids, self.values):
                w.writerow([rid] + [f"{v:.6f}" for v in row])


def rank_transform(covariates):
    """Column-wise ranks, ties receiving their average rank."""
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    if np.isnan(covariates).any():
        raise ValueError("rank_transform requires complete data")
    return stats.rankdata(covariates, axis=0, method="average")


def rank_scatter(ranks):
    """Rank covariance with each variance reset to the untied value ``(n^2 - 1) / 12``.

    Correlations are preserved. Constant columns get zero rows and columns.
    """
    n = ranks.shape[0]
    cov = np.atleast_2d(np.cov(ranks, rowvar=False))
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    target = (n * n - 1) / 12.0
    ratio = np.where(sd > 0, np.sqrt(target) / np.where(sd > 0, sd, 1.0), 0.0)
    return cov * np.outer(ratio, ratio)


def _whitener(scatter, rcond=1e-10):
    """``L`` with ``L @ L.T`` equal to the Moore-Penrose inverse of ``scatter``."""
    vals, vecs = np.linalg.eigh(scatter)
    top = vals.max() if vals.size else 0.0
    keep = vals > rcond * max(top, 0.0)
    return vecs[:, keep] / np.sqrt(vals[keep])


def robust_mahalanobis(covariates, ids, group_a_ids, group_b_ids):
    """Squared robust Mahalanobis distance between every A and B subject.

    Ranks and their scatter are computed over all rows of ``covariates``;
    ``ids`` labels those rows.
    """
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    if covariates.shape[0] < 2:
        raise ValueError("robust Mahalanobis distance needs at least two subjects")
    if covariates.shape[1] < 1:
        raise ValueError("robust Mahalanobis distance needs at least one covariate")
    pos = {s: k for k, s in enumerate(ids)}
    ranks = rank_transform(covariates)
    L = _whitener(rank_scatter(ranks))
    z = ranks @ L
    za = z[[pos[s] for s in group_a_ids]]
    zb = z[[pos[s] for s in group_b_ids]]
    if z.shape[1] == 0:
        vals = np.zeros((len(za), len(zb)))
    else:
        vals = cdist(za, zb, "sqeuclidean")
    return DistanceMatrix(list(group_a_ids), list(group_b_ids), vals)


def apply_caliper(dist, prop, spec=CaliperSpec(), logit_sd=None):
    """Soft caliper on the logit propensity.

    Pairs farther apart than ``width_in_sd`` standard deviations pay
    ``penalty_per_sd`` per standard deviation of excess; everything stays
    finite so a full matching always exists.
    """
    sd = prop.logit_sd if logit_sd is None else float(logit_sd)
    penalty = spec.resolve_penalty(dist)
    if sd <= 0:
        return DistanceMatrix(dist.row_ids, dist.col_ids, dist.values.copy(), penalty, 0)
    la = prop.logit_of(dist.row_ids)
    lb = prop.logit_of(dist.col_ids)
    gap = np.abs(la[:, None] - lb[None, :]) / sd
    excess = np.clip(gap - spec.width_in_sd, 0.0, None)
    return DistanceMatrix(dist.row_ids, dist.col_ids, dist.values + penalty * excess,
                          penalty, int(np.count_nonzero(excess)))
