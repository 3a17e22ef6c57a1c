"""From patient records to batch-RL transitions.

Covers EDWA imputation of missing biomarkers, the fixed state layout, the
per-target action vocabulary and the transition builder.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import rewards as rw
from .cohort import (
    BIOMARKERS,
    CODE_INDEX,
    RACES,
    SUBCLASS_CODES,
    TARGETS,
    THERAPEUTIC_CLASS,
    BiomarkerPanel,
    PatientRecord,
    canonical_regimen,
    restrict_regimen,
)
from .errors import EmptyDatasetError
from .risk import DEFAULT_COEFFICIENTS, FrsCoefficients, FrsInput, frs_risk

HISTORY_WINDOW_DAYS = 183
EDWA_WINDOW_DAYS = 90
EDWA_HALF_LIFE_DAYS = 30.0


def _feature_names() -> list[str]:
    names = ["age", "sex_male"]
    names += [f"race_{r}" for r in RACES]
    names += ["smoker"]
    names += [f"cur_{b}" for b in BIOMARKERS]
    names += [f"mean183_{b}" for b in BIOMARKERS]
    names += [f"rx183_{c}" for c in SUBCLASS_CODES]
    names += ["days_since_previous", "days_since_first"]
    return names


FEATURE_NAMES = tuple(_feature_names())
STATE_DIM = len(FEATURE_NAMES)
_IDX = {n: i for i, n in enumerate(FEATURE_NAMES)}
CONTINUOUS = np.array(
    [n == "age" or n.startswith(("cur_", "mean183_", "days_since")) for n in FEATURE_NAMES]
)

# Column groups used by permutation importance.
FEATURE_BLOCKS: dict[str, tuple[int, ...]] = {
    "demographics": tuple(range(0, 8)),
    **{b: (_IDX[f"cur_{b}"], _IDX[f"mean183_{b}"]) for b in BIOMARKERS},
    "prescription_history": tuple(_IDX[f"rx183_{c}"] for c in SUBCLASS_CODES),
    "encounter_timing": (_IDX["days_since_previous"], _IDX["days_since_first"]),
}


# ---------------------------------------------------------------- imputation

def edwa_impute(
    series: Iterable[tuple[float, float]],
    query_day: float,
    window: float = EDWA_WINDOW_DAYS,
    half_life: float = EDWA_HALF_LIFE_DAYS,
) -> float | None:
    """Exponentially decaying weighted average of ``(day, value)`` observations.

    Only observations in ``[query_day - window, query_day]`` count; each is
    weighted by ``0.5 ** (lag / half_life)``. Returns None when the window is
    empty.
    """
    num = den = 0.0
    for day, value in series:
        if value is None:
            continue
        lag = query_day - day
        if lag < 0 or lag > window:
            continue
        w = 0.5 ** (lag / half_life)
        num += w * value
        den += w
    if den == 0.0:
        return None
    return num / den


def impute_record(record: PatientRecord) -> PatientRecord:
    """Fill missing biomarkers from the patient's earlier observed values."""
    observed = {b: [] for b in BIOMARKERS}
    encounters = []
    for enc in record.encounters:
        filled = {}
        for b in BIOMARKERS:
            v = enc.panel.get(b)
            if v is None:
                filled[b] = edwa_impute(observed[b], enc.day)
            else:
                filled[b] = v
                observed[b].append((enc.day, v))
        panel = BiomarkerPanel(**filled)
        if panel.sbp is not None and panel.dbp is not None and panel.dbp >= panel.sbp:
            # Imputed DBP may not overtake an observed SBP; drop the imputed side.
            panel = replace(panel, dbp=enc.panel.dbp, sbp=enc.panel.sbp)
        encounters.append(replace(enc, panel=panel))
    return replace(record, encounters=tuple(encounters))


def impute_cohort(cohort: Sequence[PatientRecord]) -> list[PatientRecord]:
    return [impute_record(r) for r in cohort]


# ---------------------------------------------------------------- vocabulary

@dataclass
class ActionVocabulary:
    """Dense ids for regimen sets. The empty regimen is always id 0."""

    target: str
    regimens: list[tuple[str, ...]]
    frequency: list[int]

    def __post_init__(self):
        self._index = {r: i for i, r in enumerate(self.regimens)}
        if len(self._index) != len(self.regimens):
            raise ValueError("duplicate regimen in vocabulary")
        if not self.regimens or self.regimens[0] != ():
            raise ValueError("vocabulary must start with the empty regimen")

    def __len__(self) -> int:
        return len(self.regimens)

    def __contains__(self, regimen) -> bool:
        return tuple(regimen) in self._index

    def id_of(self, regimen: Sequence[str]) -> int:
        return self._index[canonical_regimen(regimen)]

    def map_regimen(self, regimen: Iterable[str]) -> int:
        """Id of ``regimen`` restricted to this target, or of its largest
        contained vocabulary subset (ties go to the more frequent entry)."""
        reg = restrict_regimen(regimen, self.target)
        if reg in self._index:
            return self._index[reg]
        s = set(reg)
        best, best_key = 0, None
        for i, cand in enumerate(self.regimens):
            if set(cand) <= s:
                key = (len(cand), self.frequency[i], -i)
                if best_key is None or key > best_key:
                    best, best_key = i, key
        return best

    def to_dict(self) -> dict:
        return {"target": self.target, "regimens": [list(r) for r in self.regimens], "frequency": list(self.frequency)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ActionVocabulary":
        return cls(obj["target"], [tuple(r) for r in obj["regimens"]], [int(f) for f in obj["frequency"]])


def build_action_vocab(cohort: Sequence[PatientRecord], target: str, min_count: int = 5) -> ActionVocabulary:
    """Vocabulary of the target-restricted regimens seen at >= ``min_count`` encounters."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}")
    if not cohort:
        raise EmptyDatasetError("cannot build a vocabulary from an empty cohort")
    counts = Counter(restrict_regimen(e.prescriptions, target) for r in cohort for e in r.encounters)
    kept = [reg for reg, n in counts.items() if reg and n >= min_count]
    kept.sort(key=lambda reg: (-counts[reg], [CODE_INDEX[c] for c in reg]))
    return ActionVocabulary(target, [()] + kept, [counts.get((), 0)] + [counts[r] for r in kept])


# ---------------------------------------------------------------- features

@dataclass
class FeatureStats:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, raw_states: np.ndarray) -> "FeatureStats":
        raw_states = np.asarray(raw_states, dtype=float)
        mean = np.zeros(STATE_DIM)
        sd = np.ones(STATE_DIM)
        if raw_states.shape[0]:
            cont = raw_states[:, CONTINUOUS]
            with np.errstate(invalid="ignore"):
                m = np.array([np.nanmean(c) if np.isfinite(c).any() else 0.0 for c in cont.T])
                s = np.array([np.nanstd(c) if np.isfinite(c).any() else 0.0 for c in cont.T])
            s[~(s > 0)] = 1.0
            mean[CONTINUOUS] = m
            sd[CONTINUOUS] = s
        return cls(mean, sd)

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        z = (np.asarray(raw, dtype=float) - self.mean) / self.sd
        # Still-missing biomarkers take the training mean.
        return np.where(np.isnan(z), 0.0, z)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "FeatureStats":
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["sd"], dtype=float))


def _record_arrays(record: PatientRecord):
    days = np.array([e.day for e in record.encounters], dtype=float)
    values = np.array(
        [[np.nan if e.panel.get(b) is None else e.panel.get(b) for b in BIOMARKERS] for e in record.encounters],
        dtype=float,
    ).reshape(len(days), len(BIOMARKERS))
    rx = np.zeros((len(days), len(SUBCLASS_CODES)))
    for i, e in enumerate(record.encounters):
        for c in e.prescriptions:
            rx[i, CODE_INDEX[c]] = 1.0
    return days, values, rx


def _history_masks(days: np.ndarray) -> np.ndarray:
    """mask[i, j] true when encounter j is before i and within the history window."""
    lag = days[:, None] - days[None, :]
    idx = np.arange(len(days))
    return (idx[None, :] < idx[:, None]) & (lag <= HISTORY_WINDOW_DAYS)


def featurize_record(record: PatientRecord, stats: FeatureStats | None = None) -> np.ndarray:
    """State vectors for every encounter of ``record`` (one row each)."""
    days, values, rx = _record_arrays(record)
    n = len(days)
    demo = record.demographics
    X = np.zeros((n, STATE_DIM))
    X[:, _IDX["age"]] = demo.age_at_first_encounter + days / 365.25
    X[:, _IDX["sex_male"]] = float(demo.sex == "male")
    X[:, _IDX[f"race_{demo.race}"]] = 1.0
    X[:, _IDX["smoker"]] = float(demo.smoker)
    cur = _IDX["cur_" + BIOMARKERS[0]]
    X[:, cur:cur + len(BIOMARKERS)] = values

    mask = _history_masks(days)
    finite = np.isfinite(values)
    counts = mask.astype(float) @ finite.astype(float)
    sums = mask.astype(float) @ np.where(finite, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        trailing = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), np.nan)
    # No prior encounter at all: history block is zero, not missing.
    trailing[~mask.any(axis=1)] = 0.0
    m183 = _IDX["mean183_" + BIOMARKERS[0]]
    X[:, m183:m183 + len(BIOMARKERS)] = trailing

    rx0 = _IDX["rx183_" + SUBCLASS_CODES[0]]
    X[:, rx0:rx0 + len(SUBCLASS_CODES)] = (mask.astype(float) @ rx > 0).astype(float)

    prev = np.concatenate([[0.0], np.diff(days)])
    X[:, _IDX["days_since_previous"]] = prev
    X[:, _IDX["days_since_first"]] = days - days[0]
    if stats is not None:
        X = stats.standardize(X)
    return X


def featurize(record: PatientRecord, encounter_index: int, stats: FeatureStats | None = None) -> np.ndarray:
    if not 0 <= encounter_index < len(record.encounters):
        raise IndexError(f"encounter_index {encounter_index} out of range")
    return featurize_record(record, stats)[encounter_index]


def bp_treated_flags(record: PatientRecord) -> np.ndarray:
    """Per encounter: any antihypertensive in the prior 183-day history."""
    days, _, rx = _record_arrays(record)
    htn = np.array([THERAPEUTIC_CLASS[c] == "antihypertensive" for c in SUBCLASS_CODES])
    return (_history_masks(days).astype(float) @ rx[:, htn]).sum(axis=1) > 0


def encounter_frs(record: PatientRecord, coef: FrsCoefficients = DEFAULT_COEFFICIENTS) -> np.ndarray:
    """FRS percent per encounter; NaN when TC, HDL or SBP is missing."""
    treated = bp_treated_flags(record)
    demo = record.demographics
    out = np.full(len(record.encounters), np.nan)
    for i, e in enumerate(record.encounters):
        p = e.panel
        if p.tc is None or p.hdl is None or p.sbp is None:
            continue
        out[i] = frs_risk(
            FrsInput(
                age=demo.age_at_first_encounter + e.day / 365.25,
                sex=demo.sex,
                total_cholesterol=p.tc,
                hdl=p.hdl,
                sbp=p.sbp,
                bp_treated=bool(treated[i]),
                smoker=demo.smoker,
            ),
            coef,
        )
    return out


# ---------------------------------------------------------------- transitions

OUTCOMES = ("a1c", "sbp", "dbp", "tc", "ldl", "hdl", "triglycerides", "frs")


class TransitionTuple(NamedTuple):
    state: np.ndarray
    action_id: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    patient_id: str
    encounter_index: int


@dataclass
class TransitionSet:
    """Column-oriented batch of one-step transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    patient_ids: np.ndarray
    encounter_index: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> TransitionTuple:
        return TransitionTuple(
            self.states[i], int(self.actions[i]), float(self.rewards[i]), self.next_states[i],
            bool(self.terminal[i]), str(self.patient_ids[i]), int(self.encounter_index[i]),
        )

    def __iter__(self) -> Iterator[TransitionTuple]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "TransitionSet":
        idx = np.asarray(idx)
        return TransitionSet(*(getattr(self, f)[idx] for f in _TS_FIELDS))

    def for_patients(self, patient_ids: Iterable[str]) -> "TransitionSet":
        keep = np.isin(self.patient_ids, np.asarray(list(patient_ids), dtype=object))
        return self.subset(np.flatnonzero(keep))

    @classmethod
    def from_tuples(cls, tuples: Sequence[TransitionTuple], state_dim: int | None = None) -> "TransitionSet":
        if not tuples:
            d = state_dim or 0
            return cls(np.zeros((0, d)), np.zeros(0, int), np.zeros(0), np.zeros((0, d)),
                       np.zeros(0, bool), np.zeros(0, object), np.zeros(0, int))
        return cls(
            np.array([t.state for t in tuples], dtype=float),
            np.array([t.action_id for t in tuples], dtype=int),
            np.array([t.reward for t in tuples], dtype=float),
            np.array([t.next_state for t in tuples], dtype=float),
            np.array([t.terminal for t in tuples], dtype=bool),
            np.array([t.patient_id for t in tuples], dtype=object),
            np.array([t.encounter_index for t in tuples], dtype=int),
        )


_TS_FIELDS = ("states", "actions", "rewards", "next_states", "terminal", "patient_ids", "encounter_index")


@dataclass
class EncounterTable:
    """Every (t, t+1) encounter pair of a cohort with states, actions,
    component rewards, next-encounter outcomes and subgroup attributes."""

    raw_states: np.ndarray
    raw_next_states: np.ndarray
    actions: np.ndarray
    logged_regimens: list[tuple[str, ...]]
    component_rewards: dict[str, np.ndarray]
    outcomes: dict[str, np.ndarray]
    current: dict[str, np.ndarray]
    terminal: np.ndarray
    patient_ids: np.ndarray
    encounter_index: np.ndarray
    sex: np.ndarray
    age: np.ndarray
    race: np.ndarray
    smoker: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def _reward_or_zero(fn, a, b, *args) -> float:
    if np.isnan(a) or np.isnan(b):
        return 0.0
    return fn(a, b, *args)


def encounter_table(
    cohort: Sequence[PatientRecord],
    vocab: ActionVocabulary,
    params: rw.RewardParams | None = None,
    coef: FrsCoefficients = DEFAULT_COEFFICIENTS,
) -> EncounterTable:
    params = params or rw.RewardParams()
    rows = {k: [] for k in ("s", "s2", "a", "reg", "term", "pid", "idx", "sex", "age", "race", "smoker")}
    comp = {k: [] for k in rw.COMPONENTS}
    out = {k: [] for k in OUTCOMES}
    cur = {k: [] for k in OUTCOMES}
    a1c_i, sbp_i = BIOMARKERS.index("a1c"), BIOMARKERS.index("sbp")
    for record in cohort:
        n = len(record.encounters)
        if n < 2:
            continue
        X = featurize_record(record)
        _, values, _ = _record_arrays(record)
        frs = encounter_frs(record, coef)
        demo = record.demographics
        for t in range(n - 1):
            enc = record.encounters[t]
            rows["s"].append(X[t])
            rows["s2"].append(X[t + 1])
            rows["a"].append(vocab.map_regimen(enc.prescriptions))
            rows["reg"].append(restrict_regimen(enc.prescriptions, vocab.target))
            rows["term"].append(t == n - 2)
            rows["pid"].append(record.patient_id)
            rows["idx"].append(t)
            rows["sex"].append(demo.sex)
            rows["age"].append(demo.age_at_first_encounter + enc.day / 365.25)
            rows["race"].append(demo.race)
            rows["smoker"].append(demo.smoker)
            comp["glycemia"].append(_reward_or_zero(rw.glycemia_reward, values[t, a1c_i], values[t + 1, a1c_i], params))
            comp["bp"].append(_reward_or_zero(rw.bp_reward, values[t, sbp_i], values[t + 1, sbp_i], params))
            comp["cvd"].append(_reward_or_zero(rw.cvd_reward, frs[t], frs[t + 1]))
            for k in OUTCOMES:
                if k == "frs":
                    out[k].append(frs[t + 1])
                    cur[k].append(frs[t])
                else:
                    j = BIOMARKERS.index(k)
                    out[k].append(values[t + 1, j])
                    cur[k].append(values[t, j])
    n_rows = len(rows["a"])
    return EncounterTable(
        raw_states=np.array(rows["s"], dtype=float).reshape(n_rows, STATE_DIM),
        raw_next_states=np.array(rows["s2"], dtype=float).reshape(n_rows, STATE_DIM),
        actions=np.array(rows["a"], dtype=int),
        logged_regimens=rows["reg"],
        component_rewards={k: np.array(v, dtype=float) for k, v in comp.items()},
        outcomes={k: np.array(v, dtype=float) for k, v in out.items()},
        current={k: np.array(v, dtype=float) for k, v in cur.items()},
        terminal=np.array(rows["term"], dtype=bool),
        patient_ids=np.array(rows["pid"], dtype=object),
        encounter_index=np.array(rows["idx"], dtype=int),
        sex=np.array(rows["sex"], dtype=object),
        age=np.array(rows["age"], dtype=float),
        race=np.array(rows["race"], dtype=object),
        smoker=np.array(rows["smoker"], dtype=bool),
    )


def target_rewards(table: EncounterTable, target: str, params: rw.RewardParams) -> np.ndarray:
    c = table.component_rewards
    if target == "multimorbidity":
        return np.asarray(rw.multimorbidity_reward(c["glycemia"], c["bp"], c["cvd"], params), dtype=float)
    return c[target].copy()


def all_raw_states(cohort: Sequence[PatientRecord]) -> np.ndarray:
    mats = [featurize_record(r) for r in cohort]
    return np.vstack(mats) if mats else np.zeros((0, STATE_DIM))


def build_transitions(
    cohort: Sequence[PatientRecord],
    target: str,
    vocab: ActionVocabulary,
    params: rw.RewardParams | None = None,
    stats: FeatureStats | None = None,
    coef: FrsCoefficients = DEFAULT_COEFFICIENTS,
) -> tuple[TransitionSet, FeatureStats, rw.RewardParams]:
    """Transitions for ``target`` plus the feature and reward statistics used.

    When ``stats`` is None they are fitted on every encounter of ``cohort``;
    for the multimorbidity target, unfitted reward statistics are likewise
    fitted here. Pass the training-set objects when building test data.
    """
    params = params if params is not None else rw.RewardParams()
    table = encounter_table(cohort, vocab, params, coef)
    if len(table) == 0:
        raise EmptyDatasetError("no patient has two or more encounters")
    if stats is None:
        stats = FeatureStats.fit(all_raw_states(cohort))
    if target == "multimorbidity" and not params.fitted:
        c = table.component_rewards
        rw.fit_component_stats(c["glycemia"], c["bp"], c["cvd"], params)
    ts = TransitionSet(
        states=stats.standardize(table.raw_states),
        actions=table.actions,
        rewards=target_rewards(table, target, params),
        next_states=stats.standardize(table.raw_next_states),
        terminal=table.terminal,
        patient_ids=table.patient_ids,
        encounter_index=table.encounter_index,
    )
    return ts, stats, params


# ---------------------------------------------------------------- files

def write_transitions(ts: TransitionSet, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for t in ts:
            fh.write(json.dumps({
                "state": t.state.tolist(),
                "action_id": t.action_id,
                "reward": t.reward,
                "next_state": t.next_state.tolist(),
                "terminal": t.terminal,
                "patient_id": t.patient_id,
                "encounter_index": t.encounter_index,
            }, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_transitions(path, state_dim: int = STATE_DIM) -> TransitionSet:
    tuples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                tuples.append(TransitionTuple(
                    np.asarray(o["state"], dtype=float), int(o["action_id"]), float(o["reward"]),
                    np.asarray(o["next_state"], dtype=float), bool(o["terminal"]),
                    str(o["patient_id"]), int(o["encounter_index"]),
                ))
    return TransitionSet.from_tuples(tuples, state_dim)


@dataclass
class PreparedMeta:
    """Sidecar metadata consumed by training and evaluation."""

    target: str
    vocab: ActionVocabulary
    stats: FeatureStats
    reward_params: rw.RewardParams
    train_patients: list[str]
    test_patients: list[str]

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "feature_names": list(FEATURE_NAMES),
            "vocabulary": self.vocab.to_dict(),
            "feature_stats": self.stats.to_dict(),
            "reward_params": self.reward_params.to_dict(),
            "train_patients": list(self.train_patients),
            "test_patients": list(self.test_patients),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PreparedMeta":
        return cls(
            obj["target"],
            ActionVocabulary.from_dict(obj["vocabulary"]),
            FeatureStats.from_dict(obj["feature_stats"]),
            rw.RewardParams.from_dict(obj["reward_params"]),
            list(obj["train_patients"]),
            list(obj["test_patients"]),
        )

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "PreparedMeta":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
