"""Subject records, table ingestion, eligibility cascade and availability strata."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPORT_TAGS = ("football", "hockey", "wrestling", "soccer", "lacrosse", "other-noncontact")
RISKY_SPORTS = frozenset({"hockey", "wrestling", "soccer", "lacrosse"})
PRIMARY_COMPONENTS = ("LF", "DWR", "CESD")
MISSING_TOKENS = frozenset({"", "NA"})

# Table order of the availability patterns; the empty pattern is the "None" row.
PATTERN_ORDER = (
    frozenset({"LF", "DWR", "CESD"}),
    frozenset({"LF", "DWR"}),
    frozenset({"LF", "CESD"}),
    frozenset({"DWR", "CESD"}),
    frozenset({"LF"}),
    frozenset({"DWR"}),
    frozenset({"CESD"}),
    frozenset(),
)


def pattern_label(pattern):
    if not pattern:
        return "None"
    names = {"LF": "LF", "DWR": "DWR", "CESD": "CES-D"}
    return ", ".join(names[c] for c in PRIMARY_COMPONENTS if c in pattern)


def pattern_key(pattern):
    """Compact token for file names and JSON keys, e.g. ``LF+DWR+CESD``."""
    return "+".join(c for c in PRIMARY_COMPONENTS if c in pattern) or "None"


class ArmLabel(str, enum.Enum):
    FOOTBALL = "Football"
    NONSPORT = "NonSportControl"
    OTHERSPORT = "OtherSportControl"


@dataclass(frozen=True)
class CovariateSchema:
    """Binds table header names to roles.

    ``outcomes`` maps an outcome tag to ``{wave: column}``; ``outcome_kinds``
    marks tags as ``"continuous"`` (default) or ``"binary"``.
    """

    covariates: tuple
    outcomes: dict
    id: str = "id"
    sex: str = "sex"
    yearbook_available: str = "yearbook_available"
    complex_school: str = "complex_school"
    sports: dict = field(default_factory=lambda: {t: t for t in SPORT_TAGS})
    dose: str = "football_years"
    outcome_kinds: dict = field(default_factory=dict)
    delimiter: str = ","

    @classmethod
    def from_dict(cls, raw):
        try:
            outcomes = {str(tag): {str(w): str(c) for w, c in waves.items()}
                        for tag, waves in raw["outcomes"].items()}
            kw = dict(covariates=tuple(raw["covariates"]), outcomes=outcomes)
        except (KeyError, AttributeError, TypeError) as exc:
            raise ConfigError(f"schema needs 'covariates' and 'outcomes' entries: {exc}") from None
        for key in ("id", "sex", "yearbook_available", "complex_school", "dose", "delimiter"):
            if key in raw:
                kw[key] = str(raw[key])
        if "sports" in raw:
            unknown = set(raw["sports"]) - set(SPORT_TAGS)
            if unknown:
                raise ConfigError(f"unknown sport tags in schema: {sorted(unknown)}")
            kw["sports"] = dict(raw["sports"])
        if "outcome_kinds" in raw:
            kw["outcome_kinds"] = dict(raw["outcome_kinds"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"schema file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self):
        return {
            "delimiter": self.delimiter,
            "id": self.id,
            "sex": self.sex,
            "yearbook_available": self.yearbook_available,
            "complex_school": self.complex_school,
            "sports": dict(self.sports),
            "dose": self.dose,
            "covariates": list(self.covariates),
            "outcomes": {t: dict(w) for t, w in self.outcomes.items()},
            "outcome_kinds": dict(self.outcome_kinds),
        }

    def sport_columns(self):
        """``(tag, column)`` in the fixed sport order."""
        return [(t, self.sports[t]) for t in SPORT_TAGS if t in self.sports]

    def outcome_columns(self):
        """``(tag, wave, column)`` sorted by tag then wave."""
        return [(t, w, self.outcomes[t][w]) for t in sorted(self.outcomes)
                for w in sorted(self.outcomes[t])]

    def columns(self):
        """Canonical column order, stable across a JSON round trip of the schema."""
        cols = [self.id, self.sex, self.yearbook_available, self.complex_school]
        cols += [c for _, c in self.sport_columns()]
        cols.append(self.dose)
        cols += list(self.covariates)
        cols += [c for _, _, c in self.outcome_columns()]
        return cols

    def outcome_kind(self, tag):
        return self.outcome_kinds.get(tag, "continuous")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    sex: str
    yearbook_available: bool
    complex_school: bool
    sports: frozenset
    football_years: int
    covariates: tuple
    outcomes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise ValueError(f"sex must be 'male' or 'female', got {self.sex!r}")
        if not 0 <= self.football_years <= 4:
            raise ValueError(f"football_years must be in 0..4, got {self.football_years}")
        if (self.football_years >= 1) != ("football" in self.sports):
            raise ValueError("football_years >= 1 must coincide with football participation")

    def outcome(self, tag, wave):
        return self.outcomes.get((tag, wave), math.nan)


def arm_of(record):
    """Arm label of a record, or None for a risky-sport non-football player."""
    if "football" in record.sports:
        return ArmLabel.FOOTBALL
    if not record.sports:
        return ArmLabel.NONSPORT
    if record.sports & RISKY_SPORTS:
        return None
    return ArmLabel.OTHERSPORT


def _parse_bool(text, row, col):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f"):
        return False
    raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as boolean")


def _parse_float(text, row, col):
    t = text.strip()
    if t in MISSING_TOKENS:
        return math.nan
    try:
        return float(t)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def _parse_sex(text, row, col):
    t = text.strip().lower()
    if t in ("male", "m", "1"):
        return "male"
    if t in ("female", "f", "2"):
        return "female"
    raise DataError(f"row {row}, column {col!r}: unknown sex code {text!r}")


def load_cohort(path, schema, delimiter=None):
    """Read a delimiter-separated subject table into SubjectRecords.

    Missing values are empty fields or ``NA``. Row numbers in error messages
    count the header as row 1.
    """
    delim = delimiter or schema.delimiter
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty (no header row)") from None
        expected = schema.columns()
        unknown = [h for h in header if h not in expected]
        if unknown:
            raise DataError(f"unknown column(s) not in schema: {unknown}")
        missing = [c for c in expected if c not in header]
        if missing:
            raise DataError(f"schema column(s) missing from {path.name}: {missing}")
        pos = {h: k for k, h in enumerate(header)}
        cov_pos = [pos[c] for c in schema.covariates]
        sport_pos = [(tag, pos[c]) for tag, c in schema.sports.items()]
        out_pos = [((tag, wave), pos[c]) for tag, waves in schema.outcomes.items()
                   for wave, c in waves.items()]
        records = []
        seen = set()
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {rownum}: expected {len(header)} fields, found {len(row)}")
            sid = row[pos[schema.id]].strip()
            if sid in seen:
                raise DataError(f"duplicate subject id {sid!r} at row {rownum}")
            seen.add(sid)
            sports = frozenset(tag for tag, k in sport_pos
                               if _parse_bool(row[k], rownum, header[k]))
            dose_txt = row[pos[schema.dose]].strip()
            dose = 0 if dose_txt in MISSING_TOKENS else _parse_float(dose_txt, rownum, schema.dose)
            if dose != int(dose):
                raise DataError(f"row {rownum}, column {schema.dose!r}: dose must be an integer")
            try:
                rec = SubjectRecord(
                    id=sid,
                    sex=_parse_sex(row[pos[schema.sex]], rownum, schema.sex),
                    yearbook_available=_parse_bool(row[pos[schema.yearbook_available]], rownum,
                                                   schema.yearbook_available),
                    complex_school=_parse_bool(row[pos[schema.complex_school]], rownum,
                                               schema.complex_school),
                    sports=sports,
                    football_years=int(dose),
                    covariates=tuple(_parse_float(row[k], rownum, header[k]) for k in cov_pos),
                    outcomes={key: _parse_float(row[k], rownum, header[k]) for key, k in out_pos},
                )
            except ValueError as exc:
                raise DataError(f"row {rownum}: {exc}") from None
            records.append(rec)
    return records


@dataclass(frozen=True)
class EligibilityReport:
    total: int
    dropped_missing_yearbook: int
    dropped_complex_school: int
    dropped_female: int
    dropped_risky_sport: int
    eligible: int
    n_football: int
    n_nonsport: int
    n_othersport: int

    @property
    def males_remaining(self):
        return self.eligible + self.dropped_risky_sport

    def to_dict(self):
        return {
            "total": self.total,
            "dropped_missing_yearbook": self.dropped_missing_yearbook,
            "dropped_complex_school": self.dropped_complex_school,
            "dropped_female": self.dropped_female,
            "males_remaining": self.males_remaining,
            "dropped_risky_sport": self.dropped_risky_sport,
            "eligible": self.eligible,
            "n_football": self.n_football,
            "n_nonsport": self.n_nonsport,
            "n_othersport": self.n_othersport,
        }

    def to_text(self):
        after_school = self.total - self.dropped_missing_yearbook - self.dropped_complex_school
        lines = [
            f"Subjects in input                      {self.total:>7,d}",
            f"  dropped: missing yearbook            {self.dropped_missing_yearbook:>7,d}",
            f"  dropped: complex school              {self.dropped_complex_school:>7,d}",
            f"Remaining                              {after_school:>7,d}",
            f"  dropped: female                      {self.dropped_female:>7,d}",
            f"Males                                  {self.males_remaining:>7,d}",
            f"  dropped: risky sport, no football    {self.dropped_risky_sport:>7,d}",
            f"Eligible                               {self.eligible:>7,d}",
            f"  Football                             {self.n_football:>7,d}",
            f"  Non-sport controls                   {self.n_nonsport:>7,d}",
            f"  Other-sport controls                 {self.n_othersport:>7,d}",
        ]
        return "\n".join(lines) + "\n"


def filter_eligibility(records):
    """Apply the exclusion cascade in fixed order.

    Missing yearbook, then complex school, then non-male, then risky sport
    without football. Each subject is counted at the first stage that drops
    it.
    """
    drops = {"yearbook": 0, "complex": 0, "female": 0, "risky": 0}
    arms = {ArmLabel.FOOTBALL: 0, ArmLabel.NONSPORT: 0, ArmLabel.OTHERSPORT: 0}
    eligible = []
    for rec in records:
        if not rec.yearbook_available:
            drops["yearbook"] += 1
        elif rec.complex_school:
            drops["complex"] += 1
        elif rec.sex != "male":
            drops["female"] += 1
        else:
            arm = arm_of(rec)
            if arm is None:
                drops["risky"] += 1
            else:
                arms[arm] += 1
                eligible.append(rec)
    report = EligibilityReport(
        total=len(records),
        dropped_missing_yearbook=drops["yearbook"],
        dropped_complex_school=drops["complex"],
        dropped_female=drops["female"],
        dropped_risky_sport=drops["risky"],
        eligible=len(eligible),
        n_football=arms[ArmLabel.FOOTBALL],
        n_nonsport=arms[ArmLabel.NONSPORT],
        n_othersport=arms[ArmLabel.OTHERSPORT],
    )
    return eligible, report


@dataclass(frozen=True)
class AvailabilityStratum:
    pattern: frozenset
    members: tuple

    @property
    def label(self):
        return pattern_label(self.pattern)

    @property
    def key(self):
        return pattern_key(self.pattern)


def availability_pattern(record, wave):
    return frozenset(c for c in PRIMARY_COMPONENTS
                     if not math.isnan(record.outcome(c, wave)))


def stratify_by_availability(eligible, wave):
    """Partition subjects by which primary outcome components exist at ``wave``.

    Nonempty strata are returned in table order; the ``None`` stratum (no
    component recorded) is kept and comes last.
    """
    if eligible:
        known = {w for (_, w) in eligible[0].outcomes}
        if wave not in known:
            raise DataError(f"wave {wave!r} is not among the recorded waves {sorted(known)}")
    groups = {p: [] for p in PATTERN_ORDER}
    for rec in eligible:
        groups[availability_pattern(rec, wave)].append(rec.id)
    return [AvailabilityStratum(p, tuple(groups[p])) for p in PATTERN_ORDER if groups[p]]


def availability_table(eligible, wave):
    """Counts per availability pattern and arm (rows in table order)."""
    rows = []
    arm_of_id = {r.id: arm_of(r) for r in eligible}
    strata = {s.pattern: s for s in stratify_by_availability(eligible, wave)}
    for p in PATTERN_ORDER:
        members = strata[p].members if p in strata else ()
        counts = {a: 0 for a in ArmLabel}
        for sid in members:
            counts[arm_of_id[sid]] += 1
        rows.append((pattern_label(p), counts[ArmLabel.FOOTBALL], counts[ArmLabel.NONSPORT],
                     counts[ArmLabel.OTHERSPORT],
                     counts[ArmLabel.NONSPORT] + counts[ArmLabel.OTHERSPORT]))
    return rows


def impute_covariates(records, names):
    """Mean-impute missing covariates and append missingness indicators.

    Means are pooled over all ``records`` regardless of arm. One indicator
    column ``<name>_missing`` is added for every covariate with any missing
    value. Returns ``(matrix, column_names)``.
    """
    raw = np.array([r.covariates for r in records], dtype=float).reshape(len(records), len(names))
    miss = np.isnan(raw)
    out = raw.copy()
    cols = list(names)
    extra = []
    for k, name in enumerate(names):
        if miss[:, k].any():
            if miss[:, k].all():
                raise DataError(f"covariate {name!r} is missing for every subject")
            out[miss[:, k], k] = raw[~miss[:, k], k].mean()
            extra.append(miss[:, k].astype(float))
            cols.append(f"{name}_missing")
    if extra:
        out = np.column_stack([out] + extra)
    return out, cols


@dataclass
class StudyData:
    """Array view of the eligible cohort used by the numerical modules."""

    records: list
    ids: np.ndarray
    arms: np.ndarray
    X: np.ndarray
    covariate_names: list
    base_covariates: tuple
    index: dict

    @classmethod
    def from_records(cls, eligible, schema):
        X, names = impute_covariates(eligible, schema.covariates)
        ids = np.array([r.id for r in eligible], dtype=object)
        arms = np.array([arm_of(r).value for r in eligible], dtype=object)
        return cls(records=list(eligible), ids=ids, arms=arms, X=X, covariate_names=names,
                   base_covariates=tuple(schema.covariates),
                   index={sid: k for k, sid in enumerate(ids)})

    def rows(self, ids):
        return np.array([self.index[s] for s in ids], dtype=np.intp)

    def outcome(self, tag, wave, ids=None):
        recs = self.records if ids is None else [self.records[self.index[s]] for s in ids]
        return np.array([r.outcome(tag, wave) for r in recs], dtype=float)

    def dose(self, ids):
        return np.array([self.records[self.index[s]].football_years for s in ids], dtype=float)

    def arm_ids(self, *arms):
        wanted = {ArmLabel(a).value for a in arms}
        return [s for s, a in zip(self.ids, self.arms) if a in wanted]
