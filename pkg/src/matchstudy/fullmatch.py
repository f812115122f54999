"""Optimal full matching as a minimum-cost flow.

A full matching with caps ``(kc, kt)`` is a minimum-cost edge cover of the
treated-control bipartite graph in which each treated subject touches at
most ``kc`` controls and each control at most ``kt`` treated subjects. After
dropping redundant zero-cost edges an optimal cover is a forest of stars,
and each star is a matched set whose cost is the sum of the
singleton-to-member distances.

The cover becomes a flow by the usual lower-bound shift: every treated
node supplies one unit, every control demands one, and a slack source
``S`` and sink ``T`` carry the ``kc - 1`` and ``kt - 1`` optional extra
edges per node::

    S -> t   cap kc - 1   cost 0
    t -> c   cap 1        cost d(t, c)
    c -> T   cap kt - 1   cost 0
    S -> T   bypass       cost 0
    S -> c   cap 1        cost trim_penalty   (only when trimming)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .cohort import ArmLabel, pattern_key, pattern_label
from .distance import COST_RESOLUTION, CaliperSpec, DistanceMatrix, apply_caliper
from .distance import fit_propensity, robust_mahalanobis
from .errors import InfeasibleMatchError
from .flow import FlowResult, solve_min_cost_flow  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchConstraints:
    max_controls_per_treated: int = 6
    max_treated_per_control: int = 1

    def __post_init__(self):
        if int(self.max_controls_per_treated) < 1 or int(self.max_treated_per_control) < 1:
            raise ValueError("matching caps must be at least 1")

    @property
    def caps(self):
        return int(self.max_controls_per_treated), int(self.max_treated_per_control)


@dataclass(frozen=True)
class MatchedSet:
    treated_ids: tuple
    control_ids: tuple

    def __post_init__(self):
        if not self.treated_ids or not self.control_ids:
            raise ValueError("a matched set needs at least one treated and one control")
        if len(self.treated_ids) > 1 and len(self.control_ids) > 1:
            raise ValueError("a matched set must have a single treated or a single control")

    @property
    def shape(self):
        return f"{len(self.treated_ids)}:{len(self.control_ids)}"

    @property
    def ids(self):
        return self.treated_ids + self.control_ids


@dataclass
class Matching:
    pattern: frozenset
    sets: list
    total_distance: float
    unmatched_ids: tuple = ()
    treated_role: str = "treated"
    control_role: str = "control"
    metadata: dict = field(default_factory=dict)

    @property
    def label(self):
        return pattern_label(self.pattern)

    def matched_ids(self):
        return [s for ms in self.sets for s in ms.ids]

    def set_index(self):
        """Map each matched id to the position of its set."""
        return {s: k for k, ms in enumerate(self.sets) for s in ms.ids}

    def to_dict(self):
        return {
            "stratum": pattern_key(self.pattern),
            "treated_role": self.treated_role,
            "control_role": self.control_role,
            "total_distance": self.total_distance,
            "unmatched_ids": list(self.unmatched_ids),
            "sets": [{"treated_ids": list(ms.treated_ids), "control_ids": list(ms.control_ids)}
                     for ms in self.sets],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, raw):
        key = raw["stratum"]
        pattern = frozenset() if key == "None" else frozenset(key.split("+"))
        sets = [MatchedSet(tuple(s["treated_ids"]), tuple(s["control_ids"])) for s in raw["sets"]]
        return cls(pattern, sets, float(raw["total_distance"]), tuple(raw.get("unmatched_ids", ())),
                   raw.get("treated_role", "treated"), raw.get("control_role", "control"),
                   dict(raw.get("metadata", {})))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# specialised solver
# ---------------------------------------------------------------------------

@njit(cache=True)
def _relax(dist, pred, v, nd, u, bound, excess, backward):
    # a node farther than the nearest target found so far cannot be settled
    # before the search ends, and its potential update is the same either way
    if nd < dist[v] and nd <= bound[0]:
        dist[v] = nd
        pred[v] = u
        if (excess[v] > 0) if backward else (excess[v] < 0):
            bound[0] = nd


@njit(cache=True)
def _cover_kernel(C, kc, kt, trim_cost, trim):
    """Successive shortest paths on the implicit cover network.

    Each augmentation starts from a single node with excess: first treated
    nodes (forward search), then controls still short of flow (backward
    search on reversed arcs), then ``S``. Residual t->c arcs are scanned
    from a dense boolean edge matrix; reverse arcs from partner lists.
    Returns the edge matrix, discarded controls, augmentation count and
    a status (-1 success, otherwise the node whose search got stuck).
    """
    nT, nC = C.shape
    V = nT + nC + 2
    S = nT + nC
    T = S + 1
    INF = np.int64(2) ** 62
    X = np.zeros((nT, nC), np.bool_)
    tp = np.full((nT, kc), -1, np.int64)
    nt = np.zeros(nT, np.int64)
    cp = np.full((nC, kt), -1, np.int64)
    ncp = np.zeros(nC, np.int64)
    fS = np.zeros(nT, np.int64)
    fT = np.zeros(nC, np.int64)
    fD = np.zeros(nC, np.int64)
    A = nT * (kc - 1) + (nC if trim else 0)
    fB = np.int64(0)
    excess = np.zeros(V, np.int64)
    excess[:nT] = 1
    excess[nT:nT + nC] = -1
    excess[S] = A
    excess[T] = -(A + nT - nC)
    pot = np.zeros(V, np.int64)
    dist = np.empty(V, np.int64)
    done = np.empty(V, np.bool_)
    pred = np.empty(V, np.int64)
    bound = np.empty(1, np.int64)
    n_aug = 0
    while True:
        src = -1
        backward = False
        for i in range(nT):
            if excess[i] > 0:
                src = i
                break
        if src < 0:
            for j in range(nC):
                if excess[nT + j] < 0:
                    src = nT + j
                    backward = True
                    break
        if src < 0:
            if excess[S] > 0:
                src = S
            else:
                break
        for v in range(V):
            dist[v] = INF
            done[v] = False
            pred[v] = -1
        dist[src] = 0
        bound[0] = INF
        end = -1
        while True:
            # linear scan beats a heap here: each row scan relaxes a whole side
            u = -1
            d = INF
            for v in range(V):
                if not done[v] and dist[v] < d:
                    d = dist[v]
                    u = v
            if u < 0:
                break
            done[u] = True
            if (not backward and excess[u] < 0) or (backward and excess[u] > 0):
                end = u
                break
            pu = pot[u]
            if not backward:
                if u < nT:
                    for j in range(nC):
                        v = nT + j
                        if not done[v] and not X[u, j]:
                            nd = d + C[u, j] + pu - pot[v]
                            _relax(dist, pred, v, nd, u, bound, excess, backward)
                    if fS[u] > 0 and not done[S]:
                        nd = d + pu - pot[S]
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
                elif u < S:
                    j = u - nT
                    for k in range(ncp[j]):
                        i = cp[j, k]
                        if not done[i]:
                            nd = d - C[i, j] + pu - pot[i]
                            _relax(dist, pred, i, nd, u, bound, excess, backward)
                    if fT[j] < kt - 1 and not done[T]:
                        nd = d + pu - pot[T]
                        _relax(dist, pred, T, nd, u, bound, excess, backward)
                    if fD[j] > 0 and not done[S]:
                        nd = d - trim_cost + pu - pot[S]
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
                elif u == S:
                    for i in range(nT):
                        if fS[i] < kc - 1 and not done[i]:
                            nd = d + pu - pot[i]
                            _relax(dist, pred, i, nd, u, bound, excess, backward)
                    if trim:
                        for j in range(nC):
                            v = nT + j
                            if fD[j] == 0 and not done[v]:
                                nd = d + trim_cost + pu - pot[v]
                                _relax(dist, pred, v, nd, u, bound, excess, backward)
                    if fB < A and not done[T]:
                        nd = d + pu - pot[T]
                        _relax(dist, pred, T, nd, u, bound, excess, backward)
                else:
                    for j in range(nC):
                        v = nT + j
                        if fT[j] > 0 and not done[v]:
                            nd = d + pu - pot[v]
                            _relax(dist, pred, v, nd, u, bound, excess, backward)
                    if fB > 0 and not done[S]:
                        nd = d + pu - pot[S]
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
            else:
                # residual arc w -> u, reduced cost c + pot[w] - pot[u]
                if u < nT:
                    for k in range(nt[u]):
                        j = tp[u, k]
                        w = nT + j
                        if not done[w]:
                            nd = d - C[u, j] + pot[w] - pu
                            _relax(dist, pred, w, nd, u, bound, excess, backward)
                    if fS[u] < kc - 1 and not done[S]:
                        nd = d + pot[S] - pu
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
                elif u < S:
                    j = u - nT
                    for i in range(nT):
                        if not done[i] and not X[i, j]:
                            nd = d + C[i, j] + pot[i] - pu
                            _relax(dist, pred, i, nd, u, bound, excess, backward)
                    if fT[j] > 0 and not done[T]:
                        nd = d + pot[T] - pu
                        _relax(dist, pred, T, nd, u, bound, excess, backward)
                    if trim and fD[j] == 0 and not done[S]:
                        nd = d + trim_cost + pot[S] - pu
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
                elif u == S:
                    for i in range(nT):
                        if fS[i] > 0 and not done[i]:
                            nd = d + pot[i] - pu
                            _relax(dist, pred, i, nd, u, bound, excess, backward)
                    if fB > 0 and not done[T]:
                        nd = d + pot[T] - pu
                        _relax(dist, pred, T, nd, u, bound, excess, backward)
                else:
                    for j in range(nC):
                        w = nT + j
                        if fT[j] < kt - 1 and not done[w]:
                            nd = d + pot[w] - pu
                            _relax(dist, pred, w, nd, u, bound, excess, backward)
                    if fB < A and not done[S]:
                        nd = d + pot[S] - pu
                        _relax(dist, pred, S, nd, u, bound, excess, backward)
        if end < 0:
            return X, fD, n_aug, src
        dend = dist[end]
        for v in range(V):
            m = dist[v] if dist[v] < dend else dend
            if backward:
                pot[v] -= m
            else:
                pot[v] += m
        amt = excess[src] if not backward else -excess[src]
        e_amt = -excess[end] if not backward else excess[end]
        if e_amt < amt:
            amt = e_amt
        v = end
        while v != src:
            w = pred[v]
            a, b = (w, v) if not backward else (v, w)
            cap = 1
            if a == S and b == T:
                cap = A - fB
            elif a == T and b == S:
                cap = fB
            elif a == S and b < nT:
                cap = kc - 1 - fS[b]
            elif a < nT and b == S:
                cap = fS[a]
            elif a == T:
                cap = fT[b - nT]
            elif b == T:
                cap = kt - 1 - fT[a - nT]
            if cap < amt:
                amt = cap
            v = w
        v = end
        while v != src:
            w = pred[v]
            a, b = (w, v) if not backward else (v, w)
            if a == S and b == T:
                fB += amt
            elif a == T and b == S:
                fB -= amt
            elif a == S and b < nT:
                fS[b] += amt
            elif a < nT and b == S:
                fS[a] -= amt
            elif a == S:
                fD[b - nT] += amt
            elif b == S:
                fD[a - nT] -= amt
            elif a == T:
                fT[b - nT] -= amt
            elif b == T:
                fT[a - nT] += amt
            elif a < nT:
                j = b - nT
                X[a, j] = True
                tp[a, nt[a]] = j
                nt[a] += 1
                cp[j, ncp[j]] = a
                ncp[j] += 1
            else:
                j = a - nT
                i = b
                X[i, j] = False
                for k in range(nt[i]):
                    if tp[i, k] == j:
                        tp[i, k] = tp[i, nt[i] - 1]
                        nt[i] -= 1
                        break
                for k in range(ncp[j]):
                    if cp[j, k] == i:
                        cp[j, k] = cp[j, ncp[j] - 1]
                        ncp[j] -= 1
                        break
            v = w
        if not backward:
            excess[src] -= amt
            excess[end] += amt
        else:
            excess[src] += amt
            excess[end] -= amt
        n_aug += 1
    return X, fD, n_aug, -1


def build_cover_network(C, kc, kt, trim_cost=None):
    """Explicit arc list of the cover network, for the general solver.

    Nodes are treated ``0..nT-1``, controls ``nT..nT+nC-1``, then ``S`` and
    ``T``. Returns ``(n_nodes, tails, heads, caps, costs, supplies, n_pair_arcs)``;
    the first ``nT * nC`` arcs are the treated-control arcs in row-major order.
    """
    nT, nC = C.shape
    S, T = nT + nC, nT + nC + 1
    tails, heads, caps, costs = [], [], [], []
    for i in range(nT):
        for j in range(nC):
            tails.append(i); heads.append(nT + j); caps.append(1); costs.append(int(C[i, j]))
    for i in range(nT):
        tails.append(S); heads.append(i); caps.append(kc - 1); costs.append(0)
    for j in range(nC):
        tails.append(nT + j); heads.append(T); caps.append(kt - 1); costs.append(0)
    A = nT * (kc - 1)
    if trim_cost is not None:
        A += nC
        for j in range(nC):
            tails.append(S); heads.append(nT + j); caps.append(1); costs.append(int(trim_cost))
    tails.append(S); heads.append(T); caps.append(A); costs.append(0)
    supplies = [1] * nT + [-1] * nC + [A, -(A + nT - nC)]
    return nT + nC + 2, tails, heads, caps, costs, supplies, nT * nC


def _check_feasible(nT, nC, kc, kt, trim):
    if nT == 0 or nC == 0:
        raise InfeasibleMatchError("full matching needs at least one treated and one control")
    if nT > kt * nC:
        raise InfeasibleMatchError(
            f"{nT} treated cannot be covered by {nC} controls taking at most {kt} treated each; "
            "raise max_treated_per_control")
    if not trim and nC > kc * nT:
        raise InfeasibleMatchError(
            f"{nC} controls cannot be placed with {nT} treated taking at most {kc} controls each; "
            "raise max_controls_per_treated or enable trimming")


def _prune_to_stars(X, C):
    """Drop edges whose endpoints both keep another edge (zero-cost ties)."""
    X = X.copy()
    deg_t = X.sum(axis=1)
    deg_c = X.sum(axis=0)
    for i, j in zip(*np.nonzero(X)):
        if deg_t[i] > 1 and deg_c[j] > 1:
            X[i, j] = False
            deg_t[i] -= 1
            deg_c[j] -= 1
    return X


def _stars(X, row_ids, col_ids):
    deg_c = X.sum(axis=0)
    sets = []
    for i in range(X.shape[0]):
        cols = np.flatnonzero(X[i])
        if len(cols) == 1 and deg_c[cols[0]] > 1:
            continue  # leaf of a control-centred star
        sets.append(MatchedSet((row_ids[i],), tuple(col_ids[j] for j in cols)))
    for j in range(X.shape[1]):
        if deg_c[j] > 1:
            rows = np.flatnonzero(X[:, j])
            sets.append(MatchedSet(tuple(row_ids[i] for i in rows), (col_ids[j],)))
    # order sets by their first treated subject's row for stable output
    row_pos = {s: k for k, s in enumerate(row_ids)}
    sets.sort(key=lambda ms: (row_pos[ms.treated_ids[0]], len(ms.treated_ids)))
    return sets


def optimal_full_match(dist, constraints=MatchConstraints(), pattern=frozenset(),
                       trim_penalty=None, solver="kernel", resolution=COST_RESOLUTION):
    """Minimum-distance full matching of ``dist.row_ids`` to ``dist.col_ids``.

    ``trim_penalty`` (a distance) lets the solver leave a control unmatched at
    that price; ``None`` keeps every subject. ``solver="network"`` routes the
    problem through the general min-cost-flow routine instead of the compiled
    kernel; both return the same optimum.
    """
    kc, kt = constraints.caps
    nT, nC = dist.shape
    trim = trim_penalty is not None
    _check_feasible(nT, nC, kc, kt, trim)
    C = dist.integer_costs(resolution)
    trim_cost = int(round(trim_penalty / resolution)) if trim else 0
    if solver == "kernel":
        X, discarded, n_aug, status = _cover_kernel(C, kc, kt, np.int64(trim_cost), trim)
        if status >= 0:
            raise InfeasibleMatchError(f"flow search stalled at node {status}")
        discarded = np.asarray(discarded) > 0
    elif solver == "network":
        n, tails, heads, caps, costs, supplies, m = build_cover_network(
            C, kc, kt, trim_cost if trim else None)
        res = solve_min_cost_flow(n, tails, heads, caps, costs, supplies)
        X = res.flow[:m].reshape(nT, nC) > 0
        n_aug = res.n_augmentations
        if trim:
            start = m + nT + nC
            discarded = res.flow[start:start + nC] > 0
        else:
            discarded = np.zeros(nC, dtype=bool)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    X = _prune_to_stars(np.asarray(X), C)
    sets = _stars(X, list(dist.row_ids), list(dist.col_ids))
    total = float(dist.values[X].sum())
    unmatched = tuple(dist.col_ids[j] for j in np.flatnonzero(discarded & ~X.any(axis=0)))
    meta = {"solver": solver, "augmentations": int(n_aug),
            "integer_cost": int(C[X].sum()), "max_controls_per_treated": kc,
            "max_treated_per_control": kt, "trimming": trim}
    return Matching(frozenset(pattern), sets, total, unmatched, metadata=meta)


def matching_cost(matching, dist):
    """Sum of singleton-to-member distances, recomputed from ``dist``."""
    r = {s: k for k, s in enumerate(dist.row_ids)}
    c = {s: k for k, s in enumerate(dist.col_ids)}
    return float(sum(dist.values[r[t], c[k]] for ms in matching.sets
                     for t in ms.treated_ids for k in ms.control_ids))


# ---------------------------------------------------------------------------
# stratified matching
# ---------------------------------------------------------------------------

def _arm_name(arm):
    return str(getattr(arm, "value", arm))


@dataclass
class StratifiedMatch:
    name: str
    treated_arm: str
    control_arms: tuple
    matchings: list
    skipped: list
    caliper: CaliperSpec = None
    propensity_scope: str = "pooled"

    def all_sets(self):
        return [ms for m in self.matchings for ms in m.sets]

    def to_dict(self):
        return {
            "name": self.name,
            "treated_arm": self.treated_arm,
            "control_arms": list(self.control_arms),
            "caliper": None if self.caliper is None else {
                "width_in_sd": self.caliper.width_in_sd, "kind": "soft penalty"},
            "propensity_scope": self.propensity_scope,
            "skipped_strata": self.skipped,
            "strata": [m.to_dict() for m in self.matchings],
        }


def stratified_full_match(study, strata, treated_arm, control_arms, constraints,
                          caliper=CaliperSpec(), propensity_scope="pooled",
                          trim_penalty=None, name=None, on_distance=None):
    """Full matching of ``treated_arm`` against ``control_arms`` inside each stratum.

    ``control_arms`` is one arm label or a sequence of them. With
    ``propensity_scope="pooled"`` one propensity model is fitted on the two
    groups over all given strata and the logit spread is taken per stratum;
    ``"stratum"`` fits a separate model in every stratum. ``on_distance``,
    if given, is called with each stratum key and its penalized DistanceMatrix.
    """
    treated = _arm_name(treated_arm)
    if isinstance(control_arms, (str, ArmLabel)):
        control_arms = (control_arms,)
    controls = tuple(_arm_name(a) for a in control_arms)
    if treated in controls:
        raise ValueError("the treated arm cannot also be a control arm")
    arm_of_id = dict(zip(study.ids, study.arms))
    pooled = None
    if propensity_scope == "pooled":
        pop = [s for st in strata for s in st.members
               if arm_of_id[s] == treated or arm_of_id[s] in controls]
        z = np.array([arm_of_id[s] == treated for s in pop], dtype=float)
        pooled = fit_propensity(study.X[study.rows(pop)], z, pop, study.covariate_names)
    elif propensity_scope != "stratum":
        raise ValueError(f"unknown propensity scope {propensity_scope!r}")
    matchings, skipped = [], []
    for stratum in strata:
        t_ids = [s for s in stratum.members if arm_of_id[s] == treated]
        c_ids = [s for s in stratum.members if arm_of_id[s] in controls]
        if not t_ids or not c_ids:
            skipped.append({"stratum": stratum.key, "n_treated": len(t_ids),
                            "n_control": len(c_ids), "reason": "an arm is empty"})
            log.info("stratum %s skipped: %d treated, %d controls", stratum.key,
                     len(t_ids), len(c_ids))
            continue
        pop = t_ids + c_ids
        rows = study.rows(pop)
        if pooled is None:
            z = np.r_[np.ones(len(t_ids)), np.zeros(len(c_ids))]
            prop = fit_propensity(study.X[rows], z, pop, study.covariate_names)
            sd = prop.logit_sd
        else:
            prop = pooled
            sd = float(np.std(prop.logit_of(pop), ddof=1))
        dist = robust_mahalanobis(study.X[rows], pop, t_ids, c_ids)
        dist = apply_caliper(dist, prop, caliper, logit_sd=sd)
        if on_distance is not None:
            on_distance(stratum.key, dist)
        m = optimal_full_match(dist, constraints, stratum.pattern, trim_penalty=trim_penalty)
        m.treated_role, m.control_role = treated, "+".join(controls)
        m.metadata.update({"n_treated": len(t_ids), "n_control": len(c_ids),
                           "logit_sd": sd, "caliper_penalty_per_sd": dist.penalty_per_sd,
                           "n_penalized_pairs": dist.n_penalized})
        matchings.append(m)
    if not matchings:
        raise InfeasibleMatchError(
            f"no stratum contains both {treated} and {'/'.join(controls)} subjects")
    return StratifiedMatch(name or f"{treated} vs {'+'.join(controls)}", treated, controls,
                           matchings, skipped, caliper, propensity_scope)


def composition_rows(max_treated=6, max_controls=6):
    return [f"{k}:1" for k in range(max_treated, 1, -1)] + \
        [f"1:{k}" for k in range(1, max_controls + 1)]


def composition_table(matchings, max_treated=6, max_controls=6):
    """Counts of set shapes ``t:c`` per stratum.

    Returns ``(row_labels, column_labels, counts)`` with rows ``6:1 ... 1:6``
    and one column per stratum in the order given.
    """
    rows = composition_rows(max_treated, max_controls)
    cols = [m.label for m in matchings]
    counts = np.zeros((len(rows), len(cols)), dtype=int)
    pos = {r: k for k, r in enumerate(rows)}
    for c, m in enumerate(matchings):
        for ms in m.sets:
            if ms.shape not in pos:
                raise ValueError(f"set shape {ms.shape} exceeds the table's caps")
            counts[pos[ms.shape], c] += 1
    return rows, cols, counts


def format_composition_table(matchings, max_treated=6, max_controls=6, delimiter="\t"):
    rows, cols, counts = composition_table(matchings, max_treated, max_controls)
    lines = [delimiter.join(["Composition"] + cols)]
    for r, vals in zip(rows, counts):
        lines.append(delimiter.join([r] + [str(int(v)) for v in vals]))
    return "\n".join(lines) + "\n"
