"""Longitudinal patient records, T2DM phenotyping, cohort files and a
synthetic cohort simulator with planted treatment responses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CohortParseError, CohortValidationError

# Subclass universe, in canonical order.
ANTIHYPERGLYCEMIC = ("PPARg", "INSR", "GLP1", "DPP4-BIG", "DPP4", "BIG", "INSR-BIG", "SGLT2", "INSO")
ANTIHYPERTENSIVE = ("ARA", "PSD", "ABAB", "ACE-TD", "ARA-TD", "ACE", "TD", "BAB", "CCB", "ARA-CCB")
ANTIHYPERLIPIDEMIC = ("BSS", "HMG", "HMG-CA", "PCSK9", "LIP")
SUBCLASS_CODES = ANTIHYPERGLYCEMIC + ANTIHYPERTENSIVE + ANTIHYPERLIPIDEMIC
CODE_INDEX = {c: i for i, c in enumerate(SUBCLASS_CODES)}

THERAPEUTIC_CLASS = {
    **{c: "antihyperglycemic" for c in ANTIHYPERGLYCEMIC},
    **{c: "antihypertensive" for c in ANTIHYPERTENSIVE},
    **{c: "antihyperlipidemic" for c in ANTIHYPERLIPIDEMIC},
}

BIOMARKERS = ("sbp", "dbp", "bmi", "weight", "a1c", "tc", "ldl", "hdl", "triglycerides", "creatinine")
RACES = ("black", "native_american", "asian", "white", "other")
SEXES = ("male", "female")
TARGETS = ("glycemia", "bp", "cvd", "multimorbidity")

# Classes whose subclasses make up each target's action space.
TARGET_CLASSES = {
    "glycemia": ("antihyperglycemic",),
    "bp": ("antihypertensive",),
    "cvd": ("antihyperlipidemic",),
    "multimorbidity": ("antihyperglycemic", "antihypertensive", "antihyperlipidemic"),
}


def therapeutic_class(code: str) -> str:
    return THERAPEUTIC_CLASS[code]


def canonical_regimen(codes: Iterable[str]) -> tuple[str, ...]:
    """Sort a set of subclass codes into canonical order, rejecting unknown codes."""
    codes = set(codes)
    unknown = codes - set(SUBCLASS_CODES)
    if unknown:
        raise ValueError(f"unknown subclass code(s): {sorted(unknown)}")
    return tuple(sorted(codes, key=CODE_INDEX.__getitem__))


def restrict_regimen(codes: Iterable[str], target: str) -> tuple[str, ...]:
    """Keep only the codes belonging to ``target``'s therapeutic class(es)."""
    classes = TARGET_CLASSES[target]
    return canonical_regimen(c for c in codes if THERAPEUTIC_CLASS[c] in classes)


@dataclass(frozen=True)
class Demographics:
    age_at_first_encounter: float
    sex: str
    race: str
    smoker: bool

    def validate(self) -> None:
        if not (18.0 <= self.age_at_first_encounter <= 110.0):
            raise ValueError(f"age {self.age_at_first_encounter} outside [18, 110]")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.race not in RACES:
            raise ValueError(f"race must be one of {RACES}, got {self.race!r}")


@dataclass(frozen=True)
class BiomarkerPanel:
    sbp: float | None = None
    dbp: float | None = None
    bmi: float | None = None
    weight: float | None = None
    a1c: float | None = None
    tc: float | None = None
    ldl: float | None = None
    hdl: float | None = None
    triglycerides: float | None = None
    creatinine: float | None = None

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def as_dict(self) -> dict[str, float | None]:
        return {b: getattr(self, b) for b in BIOMARKERS}

    def validate(self) -> None:
        for name in BIOMARKERS:
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name}={v} must be finite and > 0")
        if self.sbp is not None and self.dbp is not None and not self.sbp > self.dbp:
            raise ValueError(f"sbp {self.sbp} must exceed dbp {self.dbp}")


@dataclass(frozen=True)
class Encounter:
    day: int
    panel: BiomarkerPanel
    prescriptions: tuple[str, ...] = ()
    icd10_t2dm_flag: bool = False

    def __post_init__(self):
        object.__setattr__(self, "prescriptions", canonical_regimen(self.prescriptions))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    demographics: Demographics
    encounters: tuple[Encounter, ...]

    def __post_init__(self):
        object.__setattr__(self, "encounters", tuple(self.encounters))

    def validate(self) -> None:
        """Check type invariants; raises :class:`CohortValidationError`."""
        try:
            self.demographics.validate()
            if not self.encounters:
                raise ValueError("patient has no encounters")
            prev = -1
            for enc in self.encounters:
                if enc.day < 0:
                    raise ValueError(f"negative encounter day {enc.day}")
                if enc.day <= prev:
                    raise ValueError(f"encounter days not strictly increasing at day {enc.day}")
                prev = enc.day
                enc.panel.validate()
        except ValueError as exc:
            raise CohortValidationError(self.patient_id, str(exc)) from None


# ---------------------------------------------------------------- phenotyping

def _meets_t2dm_rules(record: PatientRecord) -> bool:
    flagged = sum(e.icd10_t2dm_flag for e in record.encounters)
    if flagged >= 2:
        return True
    # A1c readings are counted once per encounter.
    abnormal_a1c = sum(1 for e in record.encounters if e.panel.a1c is not None and e.panel.a1c >= 6.5)
    if abnormal_a1c >= 2 and flagged >= 1:
        return True
    # Metformin (BIG) alone does not qualify; acarbose has no subclass code.
    return any(
        THERAPEUTIC_CLASS[c] == "antihyperglycemic" and c != "BIG"
        for e in record.encounters
        for c in e.prescriptions
    )


def phenotype_t2dm(cohort: Sequence[PatientRecord]) -> list[PatientRecord]:
    """Return the patients selected by the rule-based T2DM phenotype.

    A patient qualifies on any of: two or more encounters carrying a T2DM
    diagnosis code; two or more encounters with A1c >= 6.5% plus at least one
    coded encounter; any antihyperglycemic prescription other than BIG.
    """
    return [r for r in cohort if _meets_t2dm_rules(r)]


# ---------------------------------------------------------------- file I/O

def record_to_dict(record: PatientRecord) -> dict:
    d = record.demographics
    return {
        "patient_id": record.patient_id,
        "demographics": {
            "age": d.age_at_first_encounter,
            "sex": d.sex,
            "race": d.race,
            "smoker": d.smoker,
        },
        "encounters": [
            {
                "day": e.day,
                "panel": e.panel.as_dict(),
                "prescriptions": list(e.prescriptions),
                "icd10_t2dm": e.icd10_t2dm_flag,
            }
            for e in record.encounters
        ],
    }


def record_from_dict(obj: Mapping) -> PatientRecord:
    demo = obj["demographics"]
    encounters = []
    for e in obj["encounters"]:
        panel = e["panel"]
        extra = set(panel) - set(BIOMARKERS)
        if extra:
            raise ValueError(f"unknown biomarker field(s) {sorted(extra)}")
        encounters.append(
            Encounter(
                day=int(e["day"]),
                panel=BiomarkerPanel(**{b: (None if panel.get(b) is None else float(panel[b])) for b in BIOMARKERS}),
                prescriptions=tuple(e["prescriptions"]),
                icd10_t2dm_flag=bool(e["icd10_t2dm"]),
            )
        )
    return PatientRecord(
        patient_id=str(obj["patient_id"]),
        demographics=Demographics(
            age_at_first_encounter=float(demo["age"]),
            sex=demo["sex"],
            race=demo["race"],
            smoker=bool(demo["smoker"]),
        ),
        encounters=tuple(encounters),
    )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_cohort(cohort: Iterable[PatientRecord], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in cohort:
            fh.write(_dumps(record_to_dict(record)))
            fh.write("\n")


def read_cohort(path) -> list[PatientRecord]:
    """Read a line-delimited cohort file, validating every record.

    Raises :class:`CohortParseError` (with the 1-based line number) for lines
    that are not well-formed records and :class:`CohortValidationError` for
    records that break a type invariant.
    """
    cohort = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = record_from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CohortParseError(lineno, str(exc)) from None
            record.validate()
            cohort.append(record)
    return cohort


def write_ground_truth(truth: Mapping[str, Mapping[str, Sequence[str]]], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for pid in truth:
            fh.write(_dumps({"patient_id": pid, "optimal": {t: list(r) for t, r in truth[pid].items()}}))
            fh.write("\n")


def read_ground_truth(path) -> dict[str, dict[str, tuple[str, ...]]]:
    truth = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                truth[str(obj["patient_id"])] = {t: canonical_regimen(r) for t, r in obj["optimal"].items()}
            except (ValueError, KeyError, TypeError) as exc:
                raise CohortParseError(lineno, str(exc)) from None
    return truth


# ---------------------------------------------------------------- simulator

DEFAULT_MISSINGNESS = {
    "a1c": 0.08,
    "lipids": 0.13,
    "vitals": 0.01,
    "creatinine": 0.05,
}
_MISSINGNESS_GROUPS = {
    "vitals": ("sbp", "dbp", "bmi", "weight"),
    "lipids": ("tc", "ldl", "hdl", "triglycerides"),
    "a1c": ("a1c",),
    "creatinine": ("creatinine",),
}

# Physiologic clamps.
CLAMPS = {
    "a1c": (4.0, 16.0),
    "sbp": (80.0, 220.0),
    "ldl": (10.0, 600.0),
    "tc": (10.0, 600.0),
    "hdl": (10.0, 600.0),
    "triglycerides": (10.0, 600.0),
    "dbp": (40.0, 140.0),
}

# Severity used by the simulated clinician: (value - threshold) / sd.
SEVERITY = {
    "glycemia": ("a1c", 5.6, 1.58),
    "bp": ("sbp", 120.0, 17.7),
    "cvd": ("ldl", 100.0, 33.53),
}
FIRST_LINE = {"glycemia": ("BIG",), "bp": ("ACE",), "cvd": ("HMG",)}
SECOND_LINE = {"glycemia": ("INSO",), "bp": ("CCB",), "cvd": ("HMG-CA",)}
_CLASS_OF_TARGET = {"glycemia": ANTIHYPERGLYCEMIC, "bp": ANTIHYPERTENSIVE, "cvd": ANTIHYPERLIPIDEMIC}
_BIOMARKER_OF_TARGET = {"glycemia": "a1c", "bp": "sbp", "cvd": "ldl"}

# Planted per-step reductions (biomarker units) before effect_scale.
# Rows: subclass. Columns: base, black, age>60, female, bmi>30, smoker.
_EFFECT_FEATURES = ("base", "black", "older", "female", "obese", "smoker")
_GLYC_EFFECTS = {
    "BIG":      (1.00, 0.00, 0.00, 0.00, 0.00, 0.00),
    "INSR":     (0.40, 0.00, 0.00, 0.00, 0.00, 0.00),
    "INSO":     (0.50, 0.00, 0.00, 0.00, 0.00, 0.00),
    "DPP4":     (0.35, 0.00, 0.00, 0.00, 0.00, 0.00),
    "GLP1":     (0.20, -0.60, 0.00, 0.00, 1.60, 0.00),
    "SGLT2":    (0.20, -0.60, 1.40, 0.00, -0.60, 0.00),
    "PPARg":    (0.30, 0.00, 0.00, 0.00, 0.00, 0.00),
    "DPP4-BIG": (0.40, 1.80, 0.00, 0.00, 0.00, 0.00),
    "INSR-BIG": (0.45, 0.00, 0.00, 0.00, 0.00, 0.00),
}
_BP_EFFECTS = {
    "ACE":     (7.0, -3.0, 0.0, 0.0, 0.0, 0.0),
    "ARA":     (5.5, 0.0, 0.0, 0.0, 0.0, 0.0),
    "CCB":     (5.0, 5.0, 0.0, 0.0, 0.0, 0.0),
    "BAB":     (4.5, 0.0, 5.0, 0.0, 0.0, 0.0),
    "TD":      (4.0, 2.0, 0.0, 0.0, 0.0, 0.0),
    "ABAB":    (4.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "ACE-TD":  (5.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "ARA-TD":  (5.5, 0.0, 0.0, 3.0, 0.0, 0.0),
    "PSD":     (3.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "ARA-CCB": (5.0, 0.0, 0.0, 0.0, 0.0, 0.0),
}
_LIPID_EFFECTS = {
    "HMG":    (14.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "HMG-CA": (12.0, 0.0, 0.0, 0.0, 0.0, 6.0),
    "PCSK9":  (10.0, 0.0, 7.0, 0.0, 0.0, 0.0),
    "LIP":    (5.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "BSS":    (6.0, 0.0, 0.0, 0.0, 0.0, 0.0),
}
_EFFECT_TABLES = {"glycemia": _GLYC_EFFECTS, "bp": _BP_EFFECTS, "cvd": _LIPID_EFFECTS}

# Mean reversion toward the patient's untreated level, per encounter step.
_REVERSION = {"a1c": 0.8, "sbp": 0.5, "dbp": 0.5, "ldl": 0.5, "hdl": 0.5, "triglycerides": 0.5, "bmi": 0.3, "creatinine": 0.3}
_DRIFT = {"a1c": 0.05, "sbp": 0.3, "ldl": 0.5}
_PROCESS_SD = {"a1c": 0.25, "sbp": 6.0, "dbp": 3.5, "ldl": 9.0, "hdl": 3.0, "triglycerides": 18.0, "bmi": 0.5, "creatinine": 0.05}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 500
    mean_encounters_per_patient: int = 20
    missingness_rates: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MISSINGNESS))
    behavior_policy_noise: float = 0.3
    effect_scale: float = 1.0
    seed: int = 0
    observation_noise: float = 1.0
    gap_median_days: float = 60.0
    gap_sigma: float = 0.5
    non_t2dm_fraction: float = 0.05
    icd10_flag_rate: float = 0.85

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if self.mean_encounters_per_patient < 1:
            raise ConfigError("mean_encounters_per_patient must be >= 1")
        probs = dict(self.missingness_rates)
        probs.update(
            behavior_policy_noise=self.behavior_policy_noise,
            non_t2dm_fraction=self.non_t2dm_fraction,
            icd10_flag_rate=self.icd10_flag_rate,
        )
        for name, p in probs.items():
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name}={p} is not a probability")
        unknown = set(self.missingness_rates) - set(_MISSINGNESS_GROUPS) - set(BIOMARKERS)
        if unknown:
            raise ConfigError(f"unknown missingness key(s) {sorted(unknown)}")
        if not self.effect_scale > 0:
            raise ConfigError("effect_scale must be > 0")
        if self.observation_noise < 0:
            raise ConfigError("observation_noise must be >= 0")
        if not (self.gap_median_days >= 1 and self.gap_sigma >= 0):
            raise ConfigError("gap_median_days must be >= 1 and gap_sigma >= 0")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass
class LatentPatient:
    """Hidden simulator state for one patient."""

    baseline: dict[str, float]
    effects: dict[str, dict[str, float]]
    height_m: float
    t2dm: bool

    def optimal_regimen(self, target: str) -> tuple[str, ...]:
        if target == "multimorbidity":
            return canonical_regimen(
                c for t in ("glycemia", "bp", "cvd") for c in self.optimal_regimen(t)
            )
        eff = self.effects[target]
        best = max(eff, key=lambda c: (eff[c], -CODE_INDEX[c]))
        return (best,)


@dataclass
class GroundTruth:
    optimal: dict[str, dict[str, tuple[str, ...]]] = field(default_factory=dict)
    latent: dict[str, LatentPatient] = field(default_factory=dict)

    def __len__(self):
        return len(self.optimal)


def _phenotype_features(demo: Demographics, bmi: float) -> np.ndarray:
    return np.array([
        1.0,
        float(demo.race == "black"),
        float(demo.age_at_first_encounter > 60),
        float(demo.sex == "female"),
        float(bmi > 30),
        float(demo.smoker),
    ])


def _planted_effects(demo, bmi, scale, rng) -> dict[str, dict[str, float]]:
    feats = _phenotype_features(demo, bmi)
    out = {}
    for target, table in _EFFECT_TABLES.items():
        codes = _CLASS_OF_TARGET[target]
        coef = np.array([table[c] for c in codes])
        mean = coef @ feats
        jitter = rng.normal(0.0, 0.03, size=len(codes)) * np.abs(coef[:, 0])
        out[target] = {c: float(scale * max(m + j, 0.0)) for c, m, j in zip(codes, mean, jitter)}
    return out


def regimen_effect(latent: LatentPatient, regimen: Iterable[str]) -> dict[str, float]:
    """Per-biomarker reduction produced by one encounter's prescriptions."""
    red = {"a1c": 0.0, "sbp": 0.0, "ldl": 0.0}
    for code in regimen:
        cls = THERAPEUTIC_CLASS[code]
        target = {"antihyperglycemic": "glycemia", "antihypertensive": "bp", "antihyperlipidemic": "cvd"}[cls]
        red[_BIOMARKER_OF_TARGET[target]] += latent.effects[target][code]
    return red


def simulate_step(
    latent: LatentPatient,
    levels: Mapping[str, float],
    regimen: Iterable[str],
    noise: Mapping[str, float] | None = None,
) -> dict[str, float]:
    """Advance true biomarker levels by one encounter under ``regimen``.

    ``noise`` holds additive process noise per biomarker (zero when omitted),
    so the step is deterministic given its inputs.
    """
    noise = noise or {}
    red = regimen_effect(latent, regimen)
    nxt = dict(levels)
    for name, kappa in _REVERSION.items():
        b = latent.baseline[name]
        nxt[name] = levels[name] + kappa * (b - levels[name]) + _DRIFT.get(name, 0.0) - red.get(name, 0.0) + noise.get(name, 0.0)
    # Half of the SBP reduction carries over to DBP.
    nxt["dbp"] -= 0.5 * red["sbp"]
    for name, (lo, hi) in CLAMPS.items():
        if name in nxt:
            nxt[name] = min(max(nxt[name], lo), hi)
    nxt["bmi"] = min(max(nxt["bmi"], 15.0), 70.0)
    nxt["creatinine"] = min(max(nxt["creatinine"], 0.3), 8.0)
    nxt["dbp"] = min(nxt["dbp"], nxt["sbp"] - 10.0)
    nxt["tc"] = min(max(nxt["ldl"] + nxt["hdl"] + nxt["triglycerides"] / 5.0, 10.0), 600.0)
    nxt["weight"] = nxt["bmi"] * latent.height_m ** 2
    return nxt


def _clinician_regimen(levels, previous: Mapping[str, tuple[str, ...]], noise: float, rng) -> dict[str, tuple[str, ...]]:
    severity = {t: (levels[b] - thr) / sd for t, (b, thr, sd) in SEVERITY.items()}
    worst = max(severity, key=lambda t: (severity[t], -list(SEVERITY).index(t)))
    regimen = {}
    for target in SEVERITY:
        if target == worst and severity[target] > 0:
            regimen[target] = SECOND_LINE[target] if severity[target] > 2.5 else FIRST_LINE[target]
        elif severity[target] > 0:
            regimen[target] = previous.get(target, ())
        else:
            regimen[target] = ()
        if rng.random() < noise:
            choices = ((),) + tuple((c,) for c in _CLASS_OF_TARGET[target])
            regimen[target] = choices[rng.integers(len(choices))]
    return regimen


def _sample_demographics(rng) -> Demographics:
    age = float(np.clip(rng.normal(63.0, 12.5), 18.0, 95.0))
    sex = "female" if rng.random() < 0.55 else "male"
    race = RACES[rng.choice(len(RACES), p=[0.34, 0.01, 0.05, 0.52, 0.08])]
    smoker = bool(rng.random() < 0.12)
    return Demographics(round(age, 1), sex, race, smoker)


def _sample_baseline(demo: Demographics, t2dm: bool, rng) -> tuple[dict[str, float], float]:
    male = demo.sex == "male"
    height = rng.normal(1.75 if male else 1.62, 0.07)
    b = {
        "a1c": float(np.clip(rng.normal(9.8, 0.9), 7.0, 12.5)) if t2dm else float(rng.normal(5.3, 0.2)),
        "sbp": float(np.clip(rng.normal(140.0, 14.0), 105.0, 200.0)),
        "bmi": float(np.clip(rng.normal(31.5, 6.0), 18.0, 55.0)),
        "ldl": float(np.clip(rng.normal(112.0, 30.0), 40.0, 260.0)),
        "hdl": float(np.clip(rng.normal(50.0 if male else 56.0, 13.0), 22.0, 110.0)),
        "triglycerides": float(np.clip(rng.lognormal(np.log(140.0), 0.45), 40.0, 550.0)),
        "creatinine": float(np.clip(rng.lognormal(np.log(0.95), 0.3), 0.4, 4.0)),
    }
    b["dbp"] = float(np.clip(0.45 * b["sbp"] + rng.normal(12.0, 5.0), 50.0, b["sbp"] - 20.0))
    return b, float(height)


def _observe(levels, missing_p: Mapping[str, float], rng) -> BiomarkerPanel:
    values = {}
    for name in BIOMARKERS:
        if rng.random() < missing_p[name]:
            values[name] = None
        else:
            digits = 1 if name in ("sbp", "dbp", "ldl", "hdl", "tc", "triglycerides") else 2
            values[name] = round(float(levels[name]), digits)
    panel = BiomarkerPanel(**values)
    if panel.sbp is not None and panel.dbp is not None and panel.dbp >= panel.sbp:
        panel = replace(panel, dbp=None)
    return panel


def _missing_probabilities(rates: Mapping[str, float]) -> dict[str, float]:
    p = {b: 0.0 for b in BIOMARKERS}
    for key, rate in rates.items():
        for b in _MISSINGNESS_GROUPS.get(key, (key,)):
            p[b] = rate
    return p


def generate_synthetic_cohort(cfg: SynthConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Simulate a T2DM cohort with planted per-patient drug responses.

    Each patient has an untreated level per biomarker and a per-subclass
    reduction that depends on sex, race, age, BMI and smoking. Biomarkers
    revert toward the untreated level, drift upward, and drop by the planted
    effect of whatever was prescribed at the previous encounter. The logged
    clinician treats the most severe condition with a guideline regimen and
    swaps in a uniformly random regimen per class with probability
    ``behavior_policy_noise``.
    """
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    missing_p = _missing_probabilities(cfg.missingness_rates)
    cohort: list[PatientRecord] = []
    truth = GroundTruth()
    width = max(4, len(str(cfg.n_patients)))
    for i, child in enumerate(ss.spawn(cfg.n_patients)):
        rng = np.random.default_rng(child)
        pid = f"P{i:0{width}d}"
        t2dm = not (rng.random() < cfg.non_t2dm_fraction)
        demo = _sample_demographics(rng)
        baseline, height = _sample_baseline(demo, t2dm, rng)
        latent = LatentPatient(baseline, _planted_effects(demo, baseline["bmi"], cfg.effect_scale, rng), height, t2dm)
        n_enc = max(2, int(rng.poisson(cfg.mean_encounters_per_patient)))

        levels = dict(baseline)
        levels["tc"] = levels["ldl"] + levels["hdl"] + levels["triglycerides"] / 5.0
        levels["weight"] = levels["bmi"] * height ** 2
        day = 0
        previous: dict[str, tuple[str, ...]] = {}
        encounters = []
        for j in range(n_enc):
            if j > 0:
                gap = cfg.gap_median_days * math.exp(cfg.gap_sigma * rng.standard_normal())
                day += max(1, int(round(gap)))
            panel = _observe(levels, missing_p, rng)
            by_class = _clinician_regimen(levels, previous, cfg.behavior_policy_noise, rng)
            if not t2dm:
                by_class["glycemia"] = ()
            previous = by_class
            regimen = canonical_regimen(c for r in by_class.values() for c in r)
            flag = bool(rng.random() < cfg.icd10_flag_rate) if t2dm else False
            encounters.append(Encounter(day, panel, regimen, flag))
            noise = {k: cfg.observation_noise * sd * rng.standard_normal() for k, sd in _PROCESS_SD.items()}
            levels = simulate_step(latent, levels, regimen, noise)
        record = PatientRecord(pid, demo, tuple(encounters))
        record.validate()
        cohort.append(record)
        truth.optimal[pid] = {t: latent.optimal_regimen(t) for t in TARGETS}
        truth.latent[pid] = latent
    return cohort, truth
