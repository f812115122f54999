"""Synthetic cohorts with planted effects, planted hidden bias and planted missingness.

Covariates are drawn within each arm from an equicorrelated normal
distribution whose mean is shifted by the arm's standardized shifts. With a
common covariance this is a multinomial logistic assignment model whose
coefficients are ``R^-1 @ shift``, so the shifts play the role of the
assignment coefficients while the arm sizes stay fixed.

A binary unmeasured confounder ``u`` is present with probability 1/2 among
controls and ``gamma0 / (1 + gamma0)`` among football players, so the odds of
football are multiplied by ``gamma0`` when ``u = 1``. It enters each outcome
with the configured loading.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .cohort import ArmLabel, CovariateSchema, PATTERN_ORDER, PRIMARY_COMPONENTS, SubjectRecord
from .errors import ConfigError

STUDY_COVARIATES = (
    "tchncntq", "parcntq", "tcheneq", "parencq", "sposcasp3", "sesp57", "hssize", "tchevl",
    "parsup", "bmpin1", "musperf", "spchperf", "schgovt", "schpubs", "rlur57", "plns58q",
    "hsmd57", "gwiiq_bm", "bmfaedu", "bmmaedu", "bklvpr", "wrmo57", "zpedyr", "zfrplc",
)

ARMS = (ArmLabel.FOOTBALL, ArmLabel.NONSPORT, ArmLabel.OTHERSPORT)


def graded_shifts(n, max_shift, seed=0):
    """``n`` standardized shifts evenly spread over ``[-max_shift, max_shift]``, shuffled."""
    vals = np.linspace(-max_shift, max_shift, n) if n > 1 else np.array([max_shift] * n)
    return tuple(float(v) for v in np.random.default_rng(seed).permutation(vals))


@dataclass(frozen=True)
class OutcomeSpec:
    """One generated outcome column ``<tag>_<wave>``.

    ``effect`` is added for football players (times years of football when
    ``per_year``), ``othersport_effect`` for other-sport controls. Binary
    outcomes put all terms on the logit scale around ``prevalence``.
    """

    tag: str
    wave: str
    kind: str = "continuous"
    effect: float = 0.0
    per_year: bool = False
    othersport_effect: float = 0.0
    signal: float = 0.15
    noise_sd: float = 1.0
    prevalence: float = 0.3
    confounder_loading: float = 0.0
    missing_rate: float = 0.0
    missing_football_logit: float = 0.0

    @property
    def column(self):
        return f"{self.tag}_{self.wave}"


def default_outcomes(wave="2004"):
    return tuple(OutcomeSpec(c, wave, missing_rate=r) for c, r in
                 zip(PRIMARY_COMPONENTS, (0.12, 0.12, 0.06)))


@dataclass(frozen=True)
class SyntheticSpec:
    n_football: int = 1000
    n_nonsport: int = 1000
    n_othersport: int = 500
    covariates: tuple = STUDY_COVARIATES
    football_shift: tuple = ()
    othersport_shift: tuple = ()
    correlation: float = 0.2
    covariate_missing_rate: float = 0.0
    outcomes: tuple = field(default_factory=default_outcomes)
    gamma0: float = 1.0
    dose_probs: tuple = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        for name in ("n_football", "n_nonsport", "n_othersport"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        k = len(self.covariates)
        for name in ("football_shift", "othersport_shift"):
            v = getattr(self, name)
            if len(v) not in (0, k):
                raise ConfigError(f"{name} needs {k} entries (or none)")
        if not -1.0 / max(k - 1, 1) < self.correlation < 1.0:
            raise ConfigError("correlation must keep the covariance positive definite")
        if not 0 <= self.covariate_missing_rate < 1:
            raise ConfigError("covariate_missing_rate must be in [0, 1)")
        if self.gamma0 < 1:
            raise ConfigError("gamma0 must be at least 1")
        p = np.asarray(self.dose_probs, dtype=float)
        if len(p) != 4 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ConfigError("dose_probs must be four probabilities summing to 1")
        for o in self.outcomes:
            if o.kind not in ("continuous", "binary"):
                raise ConfigError(f"outcome {o.column}: kind must be continuous or binary")
            if not 0 < o.prevalence < 1 or not 0 <= o.missing_rate < 1 or o.noise_sd < 0:
                raise ConfigError(f"outcome {o.column}: probabilities or noise out of range")

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        if "outcomes" in raw:
            raw["outcomes"] = tuple(OutcomeSpec(**o) for o in raw["outcomes"])
        for key in ("covariates", "football_shift", "othersport_shift", "dose_probs"):
            if key in raw:
                raw[key] = tuple(raw[key])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None

    def to_dict(self):
        d = asdict(self)
        d["outcomes"] = [asdict(o) for o in self.outcomes]
        return d

    def schema(self):
        outcomes, kinds = {}, {}
        for o in self.outcomes:
            outcomes.setdefault(o.tag, {})[o.wave] = o.column
            kinds[o.tag] = o.kind
        return CovariateSchema(covariates=tuple(self.covariates), outcomes=outcomes,
                               outcome_kinds=kinds)


def _covariates(n, shift, spec, rng):
    k = len(spec.covariates)
    R = np.full((k, k), spec.correlation) + (1 - spec.correlation) * np.eye(k)
    L = np.linalg.cholesky(R)
    X = rng.standard_normal((n, k)) @ L.T
    if len(shift):
        X = X + np.asarray(shift, dtype=float)
    return X


def simulate_arms(arms, spec, rng, patterns=None, primary_wave=None):
    """Covariates, confounder, doses and outcomes for subjects with known arms.

    ``patterns`` (optional) fixes the availability pattern of the primary
    components at ``primary_wave``, overriding the missingness model there.
    Returns a dict of arrays.
    """
    arms = np.asarray(arms, dtype=object)
    n = len(arms)
    k = len(spec.covariates)
    X = np.zeros((n, k))
    fb = arms == ArmLabel.FOOTBALL.value
    os_ = arms == ArmLabel.OTHERSPORT.value
    for mask, shift in ((fb, spec.football_shift), (os_, spec.othersport_shift),
                        (~fb & ~os_, ())):
        if mask.any():
            X[mask] = _covariates(int(mask.sum()), shift, spec, rng)
    p_u = np.where(fb, spec.gamma0 / (1 + spec.gamma0), 0.5)
    u = (rng.random(n) < p_u).astype(float)
    dose = np.where(fb, rng.choice([1, 2, 3, 4], size=n, p=spec.dose_probs), 0)
    beta = np.linspace(1.0, -1.0, k) if k > 1 else np.ones(k)
    base = X @ beta / math.sqrt(k) if k else np.zeros(n)
    outcomes = {}
    for o in spec.outcomes:
        exposure = dose if o.per_year else fb.astype(float)
        lin = o.signal * base + o.effect * exposure + o.othersport_effect * os_ \
            + o.confounder_loading * u
        if o.kind == "continuous":
            y = lin + o.noise_sd * rng.standard_normal(n)
        else:
            y = (rng.random(n) < special.expit(special.logit(o.prevalence) + lin)).astype(float)
        if o.missing_rate > 0:
            pm = special.expit(special.logit(o.missing_rate) + o.missing_football_logit * fb)
            y = np.where(rng.random(n) < pm, np.nan, y)
        outcomes[(o.tag, o.wave)] = y
    if patterns is not None:
        for c in PRIMARY_COMPONENTS:
            if (c, primary_wave) not in outcomes:
                raise ConfigError(f"no outcome {c} at wave {primary_wave} to pattern")
            y = outcomes[(c, primary_wave)]
            # refill values the missingness model removed, then impose the pattern
            fill = np.where(np.isnan(y), base * 0.15 + rng.standard_normal(n), y)
            has = np.array([c in p for p in patterns])
            outcomes[(c, primary_wave)] = np.where(has, fill, np.nan)
    if spec.covariate_missing_rate > 0:
        X = np.where(rng.random(X.shape) < spec.covariate_missing_rate, np.nan, X)
    return {"X": X, "u": u, "dose": dose, "outcomes": outcomes}


def _sports_for(arm, rng):
    if arm == ArmLabel.FOOTBALL.value:
        extra = {"other-noncontact"} if rng.random() < 0.3 else set()
        return frozenset({"football"} | extra)
    if arm == ArmLabel.OTHERSPORT.value:
        return frozenset({"other-noncontact"})
    return frozenset()


def _records(ids, arms, sim, spec, rng, sexes=None, yearbook=None, complex_=None, sports=None):
    recs = []
    n = len(ids)
    for k in range(n):
        sp = sports[k] if sports is not None else _sports_for(arms[k], rng)
        years = int(sim["dose"][k]) if "football" in sp else 0
        if "football" in sp and years == 0:
            years = 1
        recs.append(SubjectRecord(
            id=ids[k],
            sex="male" if sexes is None else sexes[k],
            yearbook_available=True if yearbook is None else bool(yearbook[k]),
            complex_school=False if complex_ is None else bool(complex_[k]),
            sports=sp,
            football_years=years,
            covariates=tuple(float(v) for v in sim["X"][k]),
            outcomes={key: float(v[k]) for key, v in sim["outcomes"].items()},
        ))
    return recs


def synthetic_records(spec, seed):
    """Eligible-only synthetic cohort as SubjectRecords plus its schema."""
    rng = np.random.default_rng(seed)
    arms = ([ArmLabel.FOOTBALL.value] * spec.n_football
            + [ArmLabel.NONSPORT.value] * spec.n_nonsport
            + [ArmLabel.OTHERSPORT.value] * spec.n_othersport)
    ids = [f"S{k:06d}" for k in range(len(arms))]
    sim = simulate_arms(arms, spec, rng)
    return _records(ids, arms, sim, spec, rng), spec.schema()


def write_cohort(records, schema, path):
    """Write records as a delimiter-separated table with the schema's column names."""
    path = Path(path)
    header = schema.columns()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [r.id, r.sex, int(r.yearbook_available), int(r.complex_school)]
            row += [int(tag in r.sports) for tag, _ in schema.sport_columns()]
            row.append(r.football_years)
            row += ["NA" if math.isnan(v) else f"{v:.6g}" for v in r.covariates]
            for tag, wave, _ in schema.outcome_columns():
                v = r.outcome(tag, wave)
                row.append("NA" if math.isnan(v) else f"{v:.6g}")
            w.writerow(row)
    return path


def write_schema(schema, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(schema.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def generate_synthetic(spec, seed, path):
    """Write a synthetic cohort to ``path`` and its schema next to it.

    Returns ``(cohort_path, schema_path)``.
    """
    records, schema = synthetic_records(spec, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(records, schema, path)
    schema_path = path.with_name(path.stem + ".schema.json")
    write_schema(schema, schema_path)
    return path, schema_path


# shape fixture ------------------------------------------------------------------

CASCADE = {
    "total": 10317,
    "missing_yearbook": 1205,
    "complex_school": 843,
    "female": 4296,
    "risky": {"hockey": 6, "wrestling": 63},
}

# availability counts per pattern in table order: football, non-sport, other-sport.
# The football CES-D-only cell is 208 so that the column sums to the 1,153 players.
TABLE2 = {
    "Football": (467, 58, 24, 55, 9, 13, 208, 319),
    "NonSportControl": (682, 118, 37, 92, 17, 14, 332, 659),
    "OtherSportControl": (301, 40, 19, 33, 4, 10, 159, 234),
}

FIXTURE_WAVE = "2004"


def fixture_spec():
    k = len(STUDY_COVARIATES)
    shift = [0.0] * k
    shift[STUDY_COVARIATES.index("hssize")] = -0.35
    shift[STUDY_COVARIATES.index("bmpin1")] = 0.25
    shift[STUDY_COVARIATES.index("gwiiq_bm")] = 0.15
    oshift = [0.0] * k
    oshift[STUDY_COVARIATES.index("musperf")] = 0.2
    outs = []
    for wave in ("1993", "2004", "2011"):
        for c in PRIMARY_COMPONENTS:
            outs.append(OutcomeSpec(c, wave, missing_rate=0.15))
    outs += [
        OutcomeSpec("hostility", "2004", missing_rate=0.1),
        OutcomeSpec("anxiety", "2004", missing_rate=0.1),
        OutcomeSpec("anger", "2004", missing_rate=0.1),
        OutcomeSpec("heavy_drinking", "2004", kind="binary", prevalence=0.12, missing_rate=0.1),
        OutcomeSpec("sei", "1975", missing_rate=0.05),
        OutcomeSpec("earnings", "1974", missing_rate=0.05),
        OutcomeSpec("vigorous", "1975", kind="binary", prevalence=0.4, missing_rate=0.05),
        OutcomeSpec("military", "1975", kind="binary", prevalence=0.3, missing_rate=0.02),
        OutcomeSpec("postsec", "1975", kind="binary", prevalence=0.35, missing_rate=0.02),
    ]
    return SyntheticSpec(football_shift=tuple(shift), othersport_shift=tuple(oshift),
                         covariate_missing_rate=0.01, outcomes=tuple(outs))


def build_shape_fixture(seed=1957):
    """Records reproducing the exclusion cascade and the wave-2004 availability counts."""
    rng = np.random.default_rng(seed)
    spec = fixture_spec()
    arms, patterns = [], []
    for arm, counts in TABLE2.items():
        for pattern, count in zip(PATTERN_ORDER, counts):
            arms += [arm] * count
            patterns += [pattern] * count
    order = rng.permutation(len(arms))
    arms = [arms[k] for k in order]
    patterns = [patterns[k] for k in order]
    eligible = simulate_arms(arms, spec, rng, patterns=patterns, primary_wave=FIXTURE_WAVE)

    n_risky = sum(CASCADE["risky"].values())
    n_other = CASCADE["missing_yearbook"] + CASCADE["complex_school"] + CASCADE["female"]
    excl_arms = [ArmLabel.NONSPORT.value] * (n_other + n_risky)
    excluded = simulate_arms(excl_arms, spec, rng)

    sexes, yearbook, complex_, sports = [], [], [], []
    for _ in range(CASCADE["missing_yearbook"]):
        sexes.append("male" if rng.random() < 0.45 else "female")
        yearbook.append(False)
        complex_.append(rng.random() < 0.1)
        sports.append(frozenset({"football"}) if rng.random() < 0.15 else frozenset())
    for _ in range(CASCADE["complex_school"]):
        sexes.append("male" if rng.random() < 0.45 else "female")
        yearbook.append(True)
        complex_.append(True)
        sports.append(frozenset({"football"}) if rng.random() < 0.15 else frozenset())
    for _ in range(CASCADE["female"]):
        sexes.append("female")
        yearbook.append(True)
        complex_.append(False)
        sports.append(frozenset({"other-noncontact"}) if rng.random() < 0.2 else frozenset())
    for tag, count in CASCADE["risky"].items():
        for _ in range(count):
            sexes.append("male")
            yearbook.append(True)
            complex_.append(False)
            extra = {"other-noncontact"} if rng.random() < 0.3 else set()
            sports.append(frozenset({tag} | extra))

    n_elig = len(arms)
    ids_all = [f"W{k:05d}" for k in rng.permutation(CASCADE["total"]) + 1]
    elig_recs = _records(ids_all[:n_elig], arms, eligible, spec, rng)
    # a few football players also wrestled; they stay in the football arm
    for k in np.flatnonzero(np.array(arms) == ArmLabel.FOOTBALL.value)[:40]:
        r = elig_recs[k]
        elig_recs[k] = SubjectRecord(r.id, r.sex, r.yearbook_available, r.complex_school,
                                     r.sports | {"wrestling"}, r.football_years, r.covariates,
                                     r.outcomes)
    excl_recs = _records(ids_all[n_elig:], excl_arms, excluded, spec, rng, sexes, yearbook,
                         complex_, sports)
    records = elig_recs + excl_recs
    records.sort(key=lambda r: r.id)
    assert len(records) == CASCADE["total"]
    return records, spec.schema()


def write_shape_fixture(directory, seed=1957):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records, schema = build_shape_fixture(seed)
    write_cohort(records, schema, directory / "wls_shape.csv")
    write_schema(schema, directory / "wls_shape.schema.json")
    return directory / "wls_shape.csv", directory / "wls_shape.schema.json"

