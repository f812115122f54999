"""End-to-end analysis: configuration, stages and artifact emission."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .balance import WEIGHTING, emit_love_plot, format_balance_table, study_balance
from .cohort import (PRIMARY_COMPONENTS, ArmLabel, CovariateSchema, StudyData,
                     availability_table, filter_eligibility, load_cohort,
                     stratify_by_availability)
from .distance import CaliperSpec
from .errors import ConfigError, MatchStudyError
from .fullmatch import MatchConstraints, format_composition_table, stratified_full_match
from .inference import (attrition_check, build_primary_outcomes, default_margin,
                        dose_scaled_test, equivalence_test, mantel_haenszel_test,
                        matched_adjusted_test, matched_logistic_test, restrict_sets,
                        tables_from_sets)
from .multiplicity import benjamini_hochberg, primary_family, render_results_table
from .sensitivity import (GammaSpec, covariance_adjust, format_sensitivity_table,
                          m_test_sensitivity, mh_sensitivity)

log = logging.getLogger(__name__)

STAGE_NAMES = ("load", "eligibility", "attrition", "matching", "balance", "primary",
               "secondary", "dose", "sensitivity")

PRIMARY_OUTCOMES = ("cognitive", "depression")
OUTCOME_COMPONENTS = {"cognitive": {"LF", "DWR"}, "depression": {"CESD"}}


@dataclass(frozen=True)
class MatchDefinition:
    treated: str
    controls: tuple
    max_controls_per_treated: int = 6
    max_treated_per_control: int = 1

    @property
    def constraints(self):
        return MatchConstraints(self.max_controls_per_treated, self.max_treated_per_control)


def default_matches():
    fb, ns, os_ = (a.value for a in (ArmLabel.FOOTBALL, ArmLabel.NONSPORT, ArmLabel.OTHERSPORT))
    return {
        "match1": MatchDefinition(fb, (ns, os_), 6, 1),
        "match2": MatchDefinition(fb, (ns,), 6, 3),
        "match3": MatchDefinition(fb, (os_,), 6, 3),
        "match4": MatchDefinition(ns, (os_,), 6, 6),
    }


@dataclass
class StudyConfig:
    cohort_path: str
    schema_path: str
    wave: str = "2004"
    matches: dict = field(default_factory=default_matches)
    caliper_width_sd: float = 0.2
    caliper_penalty_per_sd: float = None
    propensity_scope: str = "pooled"
    trim_penalty: float = None
    alpha_primary: float = 0.05
    primary_ci_level: float = 0.975
    q_secondary: float = 0.05
    secondary_ci_level: float = 0.95
    equivalence_margin: object = "auto"
    secondary: list = field(default_factory=list)
    falsification: list = field(default_factory=list)
    dose_analysis: bool = True
    attrition: bool = True
    sensitivity_grid: tuple = (1.0, 1.25, 1.5, 2.0, 3.0)
    sensitivity_level_primary: float = 0.025
    sensitivity_level_secondary: float = 0.05
    sensitivity_direction: dict = field(
        default_factory=lambda: {"cognitive": "less", "depression": "greater"})
    dump_distances: bool = False
    seed: int = 0
    output_dir: str = "matchstudy-out"
    synthetic: dict = None

    def __post_init__(self):
        for name in ("alpha_primary", "q_secondary", "primary_ci_level", "secondary_ci_level",
                     "sensitivity_level_primary", "sensitivity_level_secondary"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v!r}")
        if self.caliper_width_sd < 0:
            raise ConfigError("caliper_width_sd must be nonnegative")
        if self.propensity_scope not in ("pooled", "stratum"):
            raise ConfigError("propensity_scope must be 'pooled' or 'stratum'")
        m = self.equivalence_margin
        if not (m == "auto" or (isinstance(m, (int, float)) and m > 0)):
            raise ConfigError("equivalence_margin must be 'auto' or a positive number")
        for k, v in self.sensitivity_direction.items():
            if v not in ("greater", "less", "auto"):
                raise ConfigError(f"sensitivity direction for {k!r} must be greater, less or auto")
        try:
            GammaSpec(grid=tuple(self.sensitivity_grid))
        except ValueError as exc:
            raise ConfigError(f"sensitivity_grid: {exc}") from None
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        missing = [m for m in ("match1", "match2", "match3", "match4") if m not in self.matches]
        if missing:
            raise ConfigError(f"matches must define {missing}")
        for item in list(self.secondary) + list(self.falsification):
            if not isinstance(item, dict) or set(item) != {"tag", "wave"}:
                raise ConfigError(f"outcome entries need exactly 'tag' and 'wave': {item!r}")

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {unknown}")
        for key in ("cohort_path", "schema_path"):
            if key not in raw:
                raise ConfigError(f"configuration needs {key!r}")
        base = Path(base_dir)
        for key in ("cohort_path", "schema_path"):
            p = Path(raw[key])
            raw[key] = str(p if p.is_absolute() else base / p)
        if "matches" in raw:
            try:
                raw["matches"] = {k: MatchDefinition(v["treated"], tuple(v["controls"]),
                                                     int(v.get("max_controls_per_treated", 6)),
                                                     int(v.get("max_treated_per_control", 1)))
                                  for k, v in raw["matches"].items()}
                for md in raw["matches"].values():
                    md.constraints
                    for arm in (md.treated,) + md.controls:
                        ArmLabel(arm)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid match definition: {exc}") from None
        if "sensitivity_grid" in raw:
            raw["sensitivity_grid"] = tuple(raw["sensitivity_grid"])
        return cls(**raw)

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        d = asdict(self)
        d["matches"] = {k: {"treated": v.treated, "controls": list(v.controls),
                            "max_controls_per_treated": v.max_controls_per_treated,
                            "max_treated_per_control": v.max_treated_per_control}
                        for k, v in self.matches.items()}
        d["sensitivity_grid"] = list(self.sensitivity_grid)
        return d


def config_template():
    """Commented-by-example configuration with every key at its default."""
    cfg = StudyConfig(cohort_path="cohort.csv", schema_path="cohort.schema.json",
                      secondary=[{"tag": "cognitive", "wave": "2011"},
                                 {"tag": "depression", "wave": "2011"},
                                 {"tag": "hostility", "wave": "2004"},
                                 {"tag": "heavy_drinking", "wave": "2004"}],
                      falsification=[{"tag": "military", "wave": "1975"},
                                     {"tag": "postsec", "wave": "1975"}])
    return cfg.to_dict()


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, frozenset):
        return sorted(obj)
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

class ArtifactWriter:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def write(self, rel, text):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        if rel not in self.files:
            self.files.append(rel)
        return path

    def register(self, rel):
        if rel not in self.files:
            self.files.append(rel)

    def manifest(self, complete, stages, failed=None, error=None):
        entries = []
        for rel in sorted(self.files):
            data = (self.root / rel).read_bytes()
            entries.append({"path": rel, "sha256": hashlib.sha256(data).hexdigest(),
                            "bytes": len(data)})
        body = {"complete": complete, "stages_completed": list(stages), "files": entries,
                "failed_stage": failed, "error": error, "version": __version__}
        with open(self.root / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps(body))
        return body


@dataclass
class PipelineState:
    config: StudyConfig
    records: list = None
    eligible: list = None
    eligibility: object = None
    study: StudyData = None
    strata: list = None
    matches: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    stage_results: dict = field(default_factory=dict)


def _covariate_fn(study):
    def f(ids):
        return study.X[study.rows(ids)]
    return f


def _outcome_fn(values, study):
    def f(ids):
        return values[study.rows(ids)]
    return f


def _sets_for(stratified, components=None):
    """Sets of matchings whose stratum has any of ``components`` (all when None)."""
    out = []
    for m in stratified.matchings:
        if components is None or (m.pattern & components):
            out.extend(m.sets)
    return out


class Pipeline:
    """Runs the stages in order, writing artifacts under the output directory."""

    def __init__(self, config, out_dir=None, records=None, schema=None):
        """``records`` and ``schema`` (both or neither) replace reading the input files."""
        if (records is None) != (schema is None):
            raise ConfigError("pass records and schema together")
        self.config = config
        self.out = ArtifactWriter(out_dir or config.output_dir)
        self.state = PipelineState(config)
        self._given = (records, schema) if records is not None else None
        self.completed = []

    # -- stages -------------------------------------------------------------
    def load(self):
        cfg = self.config
        if self._given is not None:
            self.state.records, self.state.schema = list(self._given[0]), self._given[1]
        else:
            for p in (cfg.cohort_path, cfg.schema_path):
                if not Path(p).exists():
                    raise ConfigError(f"input path does not exist: {p}")
            self.state.schema = CovariateSchema.from_json(cfg.schema_path)
            self.state.records = load_cohort(cfg.cohort_path, self.state.schema)
        self._check_columns()

    def _check_columns(self):
        schema, cfg = self.state.schema, self.config
        for comp in PRIMARY_COMPONENTS:
            if cfg.wave not in schema.outcomes.get(comp, {}):
                raise ConfigError(f"schema has no {comp} column at wave {cfg.wave}")
        for item in list(cfg.secondary) + list(cfg.falsification):
            tag, wave = item["tag"], item["wave"]
            needed = [c for label, comps in OUTCOME_COMPONENTS.items() if label == tag
                      for c in sorted(comps)] or [tag]
            for c in needed:
                if wave not in schema.outcomes.get(c, {}):
                    raise ConfigError(f"configured outcome {tag} {wave}: schema has no "
                                      f"{c} column at wave {wave}")

    def eligibility(self):
        st = self.state
        st.eligible, st.eligibility = filter_eligibility(st.records)
        st.study = StudyData.from_records(st.eligible, st.schema)
        st.strata = stratify_by_availability(st.eligible, self.config.wave)
        rows = availability_table(st.eligible, self.config.wave)
        st.report["eligibility"] = st.eligibility.to_dict()
        st.report["availability"] = [
            {"pattern": r[0], "Football": r[1], "NonSportControl": r[2],
             "OtherSportControl": r[3], "all_controls": r[4]} for r in rows]
        self.out.write("tables/eligibility.txt", st.eligibility.to_text())
        lines = ["pattern\tFootball\tNonSportControl\tOtherSportControl\tall_controls"]
        lines += ["\t".join(str(x) for x in r) for r in rows]
        self.out.write("tables/availability.tsv", "\n".join(lines) + "\n")

    def attrition(self):
        if not self.config.attrition:
            return
        res = attrition_check(self.state.study, self.config.wave)
        self.state.report["attrition"] = [r.to_dict() for r in res]

    def matching(self):
        cfg, st = self.config, self.state
        caliper = CaliperSpec(cfg.caliper_width_sd, cfg.caliper_penalty_per_sd)
        # subjects with no primary component recorded stay out of matching
        strata = [s for s in st.strata if s.pattern]
        excluded = sum(len(s.members) for s in st.strata if not s.pattern)
        summary = {}
        for name, md in cfg.matches.items():
            sink = None
            if cfg.dump_distances:
                def sink(key, dist, name=name):
                    rel = f"distances/{name}_{key}.csv"
                    path = self.out.root / rel
                    path.parent.mkdir(parents=True, exist_ok=True)
                    dist.write_table(path)
                    self.out.register(rel)
            sm = stratified_full_match(st.study, strata, md.treated, md.controls,
                                       md.constraints, caliper, cfg.propensity_scope,
                                       cfg.trim_penalty, name=name, on_distance=sink)
            st.matches[name] = sm
            self.out.write(f"matchings/{name}.json", dumps(sm.to_dict()))
            kt, kc = md.max_treated_per_control, md.max_controls_per_treated
            table = format_composition_table(sm.matchings, max(kt, 6), max(kc, 6))
            self.out.write(f"tables/composition_{name}.tsv", table)
            summary[name] = {
                "treated": md.treated, "controls": list(md.controls),
                "max_controls_per_treated": kc, "max_treated_per_control": kt,
                "n_sets": len(sm.all_sets()),
                "total_distance": sum(m.total_distance for m in sm.matchings),
                "skipped_strata": sm.skipped,
            }
        st.report["matching"] = {
            "caliper": {"width_in_sd": cfg.caliper_width_sd, "kind": "soft penalty",
                        "penalty_per_sd": cfg.caliper_penalty_per_sd or "1000 x mean distance"},
            "propensity_scope": cfg.propensity_scope,
            "excluded_none_stratum": excluded,
            "set_cost": "sum of singleton-to-member distances",
            "matches": summary,
        }

    def balance(self):
        st = self.state
        out = {}
        for name, sm in st.matches.items():
            rows = study_balance(st.study, sm.treated_arm, sm.control_arms, sm.matchings)
            out[name] = [r.to_dict() for r in rows]
            self.out.write(f"tables/balance_{name}.tsv", format_balance_table(rows))
            title = f"{name}: {sm.treated_arm} vs {' + '.join(sm.control_arms)}"
            path = self.out.root / f"plots/love_{name}.svg"
            path.parent.mkdir(parents=True, exist_ok=True)
            emit_love_plot(rows, path, title)
            self.out.register(f"plots/love_{name}.svg")
        st.report["balance"] = {"weighting": WEIGHTING, "denominator": "pooled pre-match SD",
                                "matches": out}

    def primary(self):
        cfg, st = self.config, self.state
        study = st.study
        cog, dep = build_primary_outcomes(study, cfg.wave)
        st.outcomes = {"cognitive": cog.values, "depression": dep.values}
        cov = _covariate_fn(study)
        names = study.covariate_names
        tests = {}
        self._primary_stage_results = {}
        for label in PRIMARY_OUTCOMES:
            comps = OUTCOME_COMPONENTS[label]
            y = _outcome_fn(st.outcomes[label], study)

            def run(match, lab=label, comps=comps, y=y):
                sets = _sets_for(st.matches[match], comps)
                return matched_adjusted_test(y, sets, cov, names, cfg.primary_ci_level,
                                             f"{lab}: {match}")

            s1, s2a, s2b = run("match1"), run("match2"), run("match3")
            cc = run("match4")
            margin = default_margin(s2a, s2b) if cfg.equivalence_margin == "auto" \
                else float(cfg.equivalence_margin)
            s3 = equivalence_test(cc, margin, f"{label}: match4 equivalence")
            s3.notes["margin_mode"] = cfg.equivalence_margin
            tests[label] = (s1, s2a, s2b, s3)
            self._primary_stage_results[label] = {"match1": s1, "match2": s2a, "match3": s2b}
        reports = primary_family(tests, cfg.alpha_primary)
        st.primary_reports = reports
        st.report["primary"] = {
            "family_alpha": cfg.alpha_primary,
            "ci_level": cfg.primary_ci_level,
            "holm": "across outcomes on stage-1 p-values; each outcome's ordered procedure "
                    "runs at its Holm level",
            "cesd_direction": "higher CES-D = more depressive symptoms (no sign flip)",
            "reports": [r.to_dict() for r in reports],
        }
        st.report["falsification"] = self._falsification()
        self.out.write("tables/results.tsv", render_results_table(reports))

    def _falsification(self):
        cfg, st = self.config, self.state
        out = []
        sets = st.matches["match1"].all_sets()
        for item in cfg.falsification:
            vals = st.study.outcome(item["tag"], item["wave"])
            tables = tables_from_sets(sets, _outcome_fn(vals, st.study))
            res = mantel_haenszel_test(tables, 0.95, f"{item['tag']} {item['wave']}")
            out.append(res.to_dict())
        return out

    def _secondary_values(self, tag, wave):
        study = self.state.study
        if tag in PRIMARY_OUTCOMES:
            cog, dep = build_primary_outcomes(study, wave)
            return (cog if tag == "cognitive" else dep).values, "continuous"
        kind = self.state.schema.outcome_kind(tag)
        return study.outcome(tag, wave), kind

    def secondary(self):
        cfg, st = self.config, self.state
        study = st.study
        sets_all = st.matches["match1"].all_sets()
        cov = _covariate_fn(study)
        results = []
        for item in cfg.secondary:
            vals, kind = self._secondary_values(item["tag"], item["wave"])
            keep = [s for s, v in zip(study.ids, vals) if not math.isnan(v)]
            sets = restrict_sets(sets_all, keep)
            label = f"{item['tag']} {item['wave']}"
            y = _outcome_fn(vals, study)
            if kind == "binary":
                res = matched_logistic_test(y, sets, cov, study.covariate_names,
                                            cfg.secondary_ci_level, label)
            else:
                res = matched_adjusted_test(y, sets, cov, study.covariate_names,
                                            cfg.secondary_ci_level, label)
            results.append((item, kind, sets, vals, res))
        flags = benjamini_hochberg([r[4].p_value for r in results], cfg.q_secondary) \
            if results else []
        st.secondary = [(r, f) for r, f in zip(results, flags)]
        st.report["secondary"] = {
            "q": cfg.q_secondary, "ci_level": cfg.secondary_ci_level, "match": "match1",
            "results": [dict(r[4].to_dict(), kind=r[1], bh_reject=f)
                        for r, f in zip(results, flags)],
        }
        rows = [(f"{r[0]['tag']} {r[0]['wave']}", "Football vs all controls", r[4], f)
                for r, f in zip(results, flags)]
        self.out.write("tables/results.tsv",
                       render_results_table(st.primary_reports, rows))

    def dose(self):
        cfg, st = self.config, self.state
        if not cfg.dose_analysis:
            return
        study = st.study
        out = []
        for label in PRIMARY_OUTCOMES:
            sets = _sets_for(st.matches["match1"], OUTCOME_COMPONENTS[label])
            res = dose_scaled_test(_outcome_fn(st.outcomes[label], study), sets,
                                   _covariate_fn(study), study.covariate_names,
                                   lambda ids: study.dose(ids), cfg.primary_ci_level,
                                   f"{label}: per year of football")
            out.append(res.to_dict())
        st.report["dose"] = out

    def _direction(self, label, estimate):
        d = self.config.sensitivity_direction.get(label, "auto")
        if d == "auto":
            return "greater" if estimate >= 0 else "less"
        return d

    def sensitivity(self):
        cfg, st = self.config, self.state
        study = st.study
        spec = GammaSpec(grid=tuple(cfg.sensitivity_grid))
        cov = _covariate_fn(study)
        results = []
        for label in PRIMARY_OUTCOMES:
            for match, res in self._primary_stage_results[label].items():
                if res.p_value > cfg.sensitivity_level_primary:
                    continue
                sets = _sets_for(st.matches[match], OUTCOME_COMPONENTS[label])
                scored = covariance_adjust(_outcome_fn(st.outcomes[label], study), cov, sets)
                results.append(m_test_sensitivity(f"{label}: {match}", scored,
                                                  cfg.sensitivity_level_primary, spec,
                                                  self._direction(label, res.estimate)))
        for (item, kind, sets, vals, res), _flag in getattr(st, "secondary", []):
            if res.p_value > cfg.sensitivity_level_secondary:
                continue
            label = f"{item['tag']} {item['wave']}"
            y = _outcome_fn(vals, study)
            direction = self._direction(item["tag"], res.estimate)
            if kind == "binary":
                results.append(mh_sensitivity(label, tables_from_sets(sets, y),
                                              cfg.sensitivity_level_secondary, spec, direction))
            else:
                scored = covariance_adjust(y, cov, sets)
                results.append(m_test_sensitivity(label, scored, cfg.sensitivity_level_secondary,
                                                  spec, direction))
        st.report["sensitivity"] = [r.to_dict() for r in results]
        self.out.write("tables/sensitivity.tsv", format_sensitivity_table(results))

    # -- driver ---------------------------------------------------------------
    def run(self, stop_after="sensitivity"):
        if stop_after not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {stop_after!r}")
        st = self.state
        # the output location is not part of the analysis
        st.report["config"] = {k: v for k, v in self.config.to_dict().items()
                               if k != "output_dir"}
        st.report["version"] = __version__
        stage = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for stage in STAGE_NAMES:
                    log.info("stage %s", stage)
                    getattr(self, stage)()
                    self.completed.append(stage)
                    if stage == stop_after:
                        break
        except MatchStudyError as exc:
            st.report["error"] = {"stage": stage, "message": str(exc)}
            self.out.write("report.json", dumps(st.report))
            self.out.manifest(False, self.completed, stage, f"{type(exc).__name__}: {exc}")
            exc.stage = stage
            raise
        st.report["stages_completed"] = list(self.completed)
        self.out.write("report.json", dumps(st.report))
        manifest = self.out.manifest(True, self.completed)
        return st.report, manifest


def run_pipeline(config, out_dir=None, stop_after="sensitivity", records=None, schema=None):
    """Run the analysis; returns ``(report, manifest)`` or raises a MatchStudyError."""
    return Pipeline(config, out_dir, records, schema).run(stop_after)

