"""Counterfactual evaluation of a learned policy against logged prescriptions.

States are projected onto the principal components that carry 90% of their
variance. When the policy disagrees with the clinician, the outcome of the
recommended regimen is imputed as the mean outcome of the k nearest test
encounters (Euclidean, in PC space) where clinicians logged that regimen.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from . import qnet
from .cohort import PatientRecord
from .errors import DegenerateDataError, EmptyDatasetError, UnsupportedActionError, VocabularyMismatchError
from .preprocess import (
    FEATURE_BLOCKS,
    ActionVocabulary,
    EncounterTable,
    FeatureStats,
    encounter_table,
)
from .risk import DEFAULT_COEFFICIENTS, FrsCoefficients
from .trainer import recommend

log = logging.getLogger(__name__)

TARGET_OUTCOMES = {
    "glycemia": ("a1c",),
    "bp": ("sbp",),
    "cvd": ("frs",),
    "multimorbidity": ("a1c", "sbp", "triglycerides", "tc", "ldl", "hdl", "frs"),
}
THRESHOLDS = {"a1c": 8.0, "sbp": 140.0, "frs": 20.0}
VALIDITY_BIOMARKERS = ("sbp", "dbp", "triglycerides", "tc", "hdl", "ldl", "a1c")
# Scales for the combined multimorbidity delta in the discrepancy matrix.
_MM_SCALES = {"a1c": 1.58, "sbp": 17.7}


# ---------------------------------------------------------------- PCA

@dataclass
class PcaModel:
    mean: np.ndarray
    axes: np.ndarray            # (d, d), columns sorted by descending variance
    eigenvalues: np.ndarray
    explained: np.ndarray       # per-axis explained-variance fraction
    k: int

    @property
    def components(self) -> np.ndarray:
        return self.axes[:, :self.k]

    @property
    def cumulative_explained(self) -> float:
        return float(self.explained[:self.k].sum())

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.components

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.components.T + self.mean


def pca_fit(states, variance_target: float = 0.90) -> PcaModel:
    """Eigendecomposition of the sample covariance of ``states``.

    Keeps the smallest number of leading axes whose cumulative explained
    variance reaches ``variance_target``.
    """
    X = np.asarray(states, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateDataError("PCA needs at least two rows")
    if not np.isfinite(X).all():
        raise ValueError("PCA input contains non-finite values")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if not total > 0:
        raise DegenerateDataError("all rows are identical; no variance to decompose")
    explained = evals / total
    cum = np.cumsum(explained)
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    return PcaModel(mean, evecs, evals, explained, min(k, X.shape[1]))


# ---------------------------------------------------------------- kNN

def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    return ((points - q) ** 2).sum(axis=1)


@dataclass
class KnnResult:
    value: float
    neighbors: np.ndarray
    fewer_than_k: bool
    ties_expanded: bool


class KnnIndex:
    """Encounters in PC space grouped by the clinician's logged action."""

    def __init__(self, points, actions):
        self.points = np.asarray(points, dtype=float)
        self.actions = np.asarray(actions, dtype=int)
        self._groups = {int(a): np.flatnonzero(self.actions == a) for a in np.unique(self.actions)}

    def group(self, action_id: int) -> np.ndarray:
        return self._groups.get(int(action_id), np.zeros(0, dtype=int))

    def neighbors(self, query, action_id: int, k: int, valid=None, exclude: int | None = None):
        """Indices of the k nearest encounters logged with ``action_id``.

        Every encounter tied with the k-th distance is included, so more than
        k indices may come back. Returns (indices, fewer_than_k, ties_expanded).
        """
        pool = self.group(action_id)
        if valid is not None:
            pool = pool[valid[pool]]
        if exclude is not None:
            pool = pool[pool != exclude]
        if pool.size == 0:
            raise UnsupportedActionError(action_id)
        d = _sq_dist(self.points[pool], np.asarray(query, dtype=float))
        if pool.size <= k:
            return np.sort(pool), pool.size < k, False
        kth = np.partition(d, k - 1)[k - 1]
        chosen = pool[d <= kth]
        return np.sort(chosen), False, chosen.size > k


def knn_impute(query, action_id: int, index: KnnIndex, outcomes, k: int = 10,
               exclude: int | None = None) -> KnnResult:
    """Mean outcome of the nearest encounters where ``action_id`` was logged.

    Encounters with a missing (NaN) outcome are not eligible neighbors.
    """
    outcomes = np.asarray(outcomes, dtype=float)
    idx, fewer, ties = index.neighbors(query, action_id, k, valid=np.isfinite(outcomes), exclude=exclude)
    value = math.fsum(outcomes[idx].tolist()) / idx.size
    return KnnResult(value, idx, fewer, ties)


def imputation_validity_check(points, actions, outcomes: Mapping[str, np.ndarray], k: int = 10) -> dict:
    """Leave-one-out kNN imputation of each encounter's own logged action.

    For every biomarker returns the imputed and observed means and their
    Pearson correlation (None when either side is constant).
    """
    index = KnnIndex(points, actions)
    result = {}
    for name, y in outcomes.items():
        y = np.asarray(y, dtype=float)
        valid = np.isfinite(y)
        imputed, observed = [], []
        for i in np.flatnonzero(valid):
            try:
                r = knn_impute(index.points[i], int(index.actions[i]), index, y, k, exclude=int(i))
            except UnsupportedActionError:
                continue
            imputed.append(r.value)
            observed.append(y[i])
        entry = {"n": len(imputed), "imputed_mean": None, "observed_mean": None, "pearson_r": None}
        if len(imputed) < 2:
            warnings.warn(f"{name}: fewer than two encounters share a logged action; skipped", stacklevel=2)
            entry["skipped"] = True
            result[name] = entry
            continue
        imputed, observed = np.array(imputed), np.array(observed)
        entry["imputed_mean"] = float(imputed.mean())
        entry["observed_mean"] = float(observed.mean())
        if imputed.std() > 0 and observed.std() > 0:
            entry["pearson_r"] = float(np.corrcoef(imputed, observed)[0, 1])
        result[name] = entry
    return result


# ---------------------------------------------------------------- statistics

def _mean_se(x: np.ndarray) -> tuple[float | None, float | None]:
    if x.size == 0:
        return None, None
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else None
    return float(x.mean()), se


def welch_test(a, b) -> dict:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2 or (a.var() == 0 and b.var() == 0):
        return {"statistic": None, "p_value": None}
    res = sps.ttest_ind(a, b, equal_var=False)
    return {"statistic": float(res.statistic), "p_value": float(res.pvalue)}


def two_proportion_test(x1: int, n1: int, x2: int, n2: int) -> dict:
    if n1 == 0 or n2 == 0:
        return {"statistic": None, "p_value": None}
    p = (x1 + x2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0:
        return {"statistic": None, "p_value": None}
    z = (x1 / n1 - x2 / n2) / se
    return {"statistic": z, "p_value": float(2 * sps.norm.sf(abs(z)))}


def _outcome_summary(policy: np.ndarray, clinician: np.ndarray, name: str) -> dict:
    pm, pse = _mean_se(policy)
    cm, cse = _mean_se(clinician)
    dm, dse = _mean_se(policy - clinician)
    out = {
        "n": int(policy.size),
        "policy_mean": pm, "policy_se": pse,
        "clinician_mean": cm, "clinician_se": cse,
        "difference_mean": dm, "difference_se": dse,
        "welch": welch_test(policy, clinician),
    }
    if name in THRESHOLDS:
        thr = THRESHOLDS[name]
        xp, xc = int((policy > thr).sum()), int((clinician > thr).sum())
        n = int(policy.size)
        out["threshold"] = thr
        out["policy_exceed_rate"] = xp / n if n else None
        out["clinician_exceed_rate"] = xc / n if n else None
        out["policy_exceed_count"] = xp
        out["clinician_exceed_count"] = xc
        out["two_proportion"] = two_proportion_test(xp, n, xc, n)
    return out


SUBGROUPS = {
    "male": lambda t: t.sex == "male",
    "female": lambda t: t.sex == "female",
    "age_over_60": lambda t: t.age > 60,
    "age_60_or_under": lambda t: t.age <= 60,
    "white": lambda t: t.race == "white",
    "black": lambda t: t.race == "black",
    "other_race": lambda t: (t.race != "white") & (t.race != "black"),
    "smoker": lambda t: t.smoker,
    "non_smoker": lambda t: ~t.smoker,
}


def _label(regimen: Sequence[str]) -> str:
    return "+".join(regimen) if regimen else "none"


# ---------------------------------------------------------------- evaluation

@dataclass
class PolicyEvaluation:
    target: str
    summary: dict
    rows: list[dict] = field(default_factory=list)
    discrepancy: list[dict] = field(default_factory=list)
    subgroups: list[dict] = field(default_factory=list)
    histogram: list[dict] = field(default_factory=list)


def model_vocabulary(model: qnet.QNetworkParams) -> ActionVocabulary:
    if model.vocabulary is None:
        raise VocabularyMismatchError("model file carries no action vocabulary")
    vocab = ActionVocabulary.from_dict(model.vocabulary)
    if len(vocab) != model.n_actions:
        raise VocabularyMismatchError(f"model has {model.n_actions} outputs but vocabulary has {len(vocab)} entries")
    return vocab


def evaluate_policy(
    model: qnet.QNetworkParams,
    test_cohort: Sequence[PatientRecord],
    *,
    k: int = 10,
    pca: PcaModel | None = None,
    variance_target: float = 0.90,
    pool_cohort: Sequence[PatientRecord] | None = None,
    expected_vocab: ActionVocabulary | None = None,
    coef: FrsCoefficients = DEFAULT_COEFFICIENTS,
    k_sensitivity: Sequence[int] = (8, 9, 10),
) -> tuple[PolicyEvaluation, PcaModel, EncounterTable]:
    """Score ``model`` on every (t, t+1) encounter pair of ``test_cohort``.

    Concordant encounters keep their observed next-encounter outcome;
    discrepant ones get a kNN-imputed outcome for the recommended regimen.
    ``pool_cohort`` adds extra encounters (e.g. the training cohort) to the
    neighbor pool.
    """
    if not test_cohort:
        raise EmptyDatasetError("empty test cohort")
    vocab = model_vocabulary(model)
    if expected_vocab is not None and expected_vocab.regimens != vocab.regimens:
        raise VocabularyMismatchError("model vocabulary differs from the prepared dataset's vocabulary")
    if model.feature_stats is None:
        raise VocabularyMismatchError("model file carries no feature statistics")
    stats = FeatureStats.from_dict(model.feature_stats)
    target = vocab.target
    table = encounter_table(test_cohort, vocab, coef=coef)
    if len(table) == 0:
        raise EmptyDatasetError("test cohort has no encounter pairs")
    states = stats.standardize(table.raw_states)
    rec = np.asarray(recommend(model, states))
    logged = table.actions
    if pca is None:
        pca = pca_fit(states, variance_target)
    Z = pca.transform(states)

    pool_Z, pool_actions, pool_outcomes = Z, logged, table.outcomes
    if pool_cohort:
        extra = encounter_table(pool_cohort, vocab, coef=coef)
        pool_Z = np.vstack([Z, pca.transform(stats.standardize(extra.raw_states))])
        pool_actions = np.concatenate([logged, extra.actions])
        pool_outcomes = {o: np.concatenate([table.outcomes[o], extra.outcomes[o]]) for o in table.outcomes}
    index = KnnIndex(pool_Z, pool_actions)

    outcome_names = TARGET_OUTCOMES[target]
    n = len(table)
    consistent = rec == logged
    policy = {o: table.outcomes[o].copy() for o in outcome_names}
    unsupported = np.zeros(n, dtype=bool)
    fewer = np.zeros(n, dtype=bool)
    ties = np.zeros(n, dtype=bool)
    sens = {kk: {o: [] for o in outcome_names} for kk in k_sensitivity}
    for i in np.flatnonzero(~consistent):
        for o in outcome_names:
            try:
                r = knn_impute(Z[i], int(rec[i]), index, pool_outcomes[o], k)
            except UnsupportedActionError:
                unsupported[i] = True
                policy[o][i] = np.nan
                continue
            policy[o][i] = r.value
            fewer[i] |= r.fewer_than_k
            ties[i] |= r.ties_expanded
            for kk in k_sensitivity:
                v = r.value if kk == k else knn_impute(Z[i], int(rec[i]), index, pool_outcomes[o], kk).value
                if np.isfinite(table.outcomes[o][i]):
                    sens[kk][o].append(v)

    disc = ~consistent
    usable = disc & ~unsupported
    outcomes_summary = {}
    for o in outcome_names:
        ok = usable & np.isfinite(table.outcomes[o]) & np.isfinite(policy[o])
        outcomes_summary[o] = _outcome_summary(policy[o][ok], table.outcomes[o][ok], o)
    summary = {
        "target": target,
        "n_actions": len(vocab),
        "n_encounters": int(n),
        "n_consistent": int(consistent.sum()),
        "n_discrepant": int(disc.sum()),
        "concordance": float(consistent.mean()),
        "n_unsupported": int(unsupported.sum()),
        "n_fewer_than_k": int(fewer.sum()),
        "n_ties_expanded": int(ties.sum()),
        "k": k,
        "pca_components": pca.k,
        "pca_explained": pca.cumulative_explained,
        "outcomes": outcomes_summary,
        "k_sensitivity": {
            str(kk): {o: (float(np.mean(v)) if v else None) for o, v in sens[kk].items()} for kk in k_sensitivity
        },
    }

    rows = []
    for i in range(n):
        row = {
            "patient_id": str(table.patient_ids[i]),
            "encounter_index": int(table.encounter_index[i]),
            "logged_action": int(logged[i]),
            "policy_action": int(rec[i]),
            "logged_regimen": _label(table.logged_regimens[i]),
            "policy_regimen": _label(vocab.regimens[rec[i]]),
            "consistent": bool(consistent[i]),
            "unsupported": bool(unsupported[i]),
            "logged_n_drugs": len(table.logged_regimens[i]),
            "policy_n_drugs": len(vocab.regimens[rec[i]]),
            "sex": str(table.sex[i]),
            "age": float(table.age[i]),
            "race": str(table.race[i]),
            "smoker": bool(table.smoker[i]),
        }
        for o in outcome_names:
            row[f"observed_{o}"] = _finite_or_none(table.outcomes[o][i])
            row[f"policy_{o}"] = _finite_or_none(policy[o][i])
        rows.append(row)

    ev = PolicyEvaluation(target, summary, rows)
    ev.discrepancy = _discrepancy_matrix(table, vocab, rec, disc, policy, outcome_names, target)
    ev.subgroups = _subgroup_table(table, policy, usable, outcome_names)
    ev.histogram = _histogram(table, vocab, rec)
    return ev, pca, table


def _finite_or_none(v) -> float | None:
    v = float(v)
    return v if math.isfinite(v) else None


def _primary_delta(table, policy, outcome_names, target, i) -> float:
    if target != "multimorbidity":
        o = outcome_names[0]
        return policy[o][i] - table.outcomes[o][i]
    frs_sd = np.nanstd(table.outcomes["frs"]) or 1.0
    scales = dict(_MM_SCALES, frs=frs_sd)
    return float(np.mean([(policy[o][i] - table.outcomes[o][i]) / s for o, s in scales.items()]))


def _discrepancy_matrix(table, vocab, rec, disc, policy, outcome_names, target) -> list[dict]:
    cells: dict[tuple[str, str], list] = {}
    for i in np.flatnonzero(disc):
        key = (_label(table.logged_regimens[i]), _label(vocab.regimens[rec[i]]))
        cells.setdefault(key, []).append(_primary_delta(table, policy, outcome_names, target, i))
    out = []
    for (clin, pol), deltas in sorted(cells.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        d = np.array(deltas, dtype=float)
        d = d[np.isfinite(d)]
        out.append({
            "clinician_regimen": clin,
            "policy_regimen": pol,
            "count": len(deltas),
            "mean_outcome_delta": float(d.mean()) if d.size else None,
        })
    return out


def _subgroup_table(table, policy, usable, outcome_names) -> list[dict]:
    out = []
    for name, select in SUBGROUPS.items():
        sel = np.asarray(select(table), dtype=bool) & usable
        for o in outcome_names:
            ok = sel & np.isfinite(table.outcomes[o]) & np.isfinite(policy[o])
            p, c = policy[o][ok], table.outcomes[o][ok]
            pm, pse = _mean_se(p)
            cm, cse = _mean_se(c)
            bm, bse = _mean_se(p - c)
            out.append({
                "subgroup": name, "outcome": o, "n": int(ok.sum()),
                "policy_mean": pm, "policy_se": pse,
                "clinician_mean": cm, "clinician_se": cse,
                "benefit_mean": bm, "benefit_se": bse,
            })
    return out


def _histogram(table, vocab, rec) -> list[dict]:
    logged = np.array([len(r) for r in table.logged_regimens])
    pol = np.array([len(vocab.regimens[a]) for a in rec])
    top = int(max(logged.max(initial=0), pol.max(initial=0)))
    return [
        {"n_drugs": m, "clinician_count": int((logged == m).sum()), "policy_count": int((pol == m).sum())}
        for m in range(top + 1)
    ]


def permutation_importance(model: qnet.QNetworkParams, states, n_repeats: int = 5, seed: int = 0,
                           blocks: Mapping[str, Sequence[int]] = FEATURE_BLOCKS) -> list[tuple[str, float]]:
    """Fraction of greedy recommendations that change when one feature block
    is shuffled across encounters, averaged over repeats, highest first."""
    X = np.asarray(states, dtype=float)
    if X.shape[0] == 0:
        raise EmptyDatasetError("no states to permute")
    base = np.asarray(recommend(model, X))
    rng = np.random.default_rng(seed)
    scores = []
    for name, cols in blocks.items():
        cols = list(cols)
        changed = 0.0
        for _ in range(n_repeats):
            perm = rng.permutation(X.shape[0])
            Xp = X.copy()
            Xp[:, cols] = X[perm][:, cols]
            changed += float(np.mean(np.asarray(recommend(model, Xp)) != base))
        scores.append((name, changed / n_repeats))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i][1], i))
    return [scores[i] for i in order]


# ---------------------------------------------------------------- exports

def write_csv(rows: Sequence[Mapping], path, fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fieldnames})
