"""Batch DQN with uniform minibatch sampling, a periodically synced target
network, and early stopping on validation TD error.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import qnet
from .errors import ConfigError, DivergenceError, EmptyDatasetError, ShapeError
from .preprocess import TransitionSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.9
    minibatch_size: int = 256
    target_sync_period: int = 1000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int | None = 5000
    min_delta: float = 0.0
    max_iterations: int = 20000
    validation_eval_period: int = 100
    validation_fraction: float = 0.2
    hidden_sizes: tuple[int, ...] = qnet.HIDDEN_SIZES
    dropout: float = qnet.DROPOUT_RATE
    n_actions: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie in (0, 1)")
        for name in ("minibatch_size", "target_sync_period", "validation_eval_period"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 (or None to disable)")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    iterations_run: int
    curve: list[dict] = field(default_factory=list)
    best_td_error: float = math.inf
    best_iteration: int = 0
    stop_reason: str = "max_iterations"
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_seconds")
        if not math.isfinite(d["best_td_error"]):
            d["best_td_error"] = None
        return d


def split_patients(patient_ids: Sequence[str], fractions=(0.6, 0.4), seed: int = 0) -> tuple[list[str], list[str]]:
    """Random patient-level split; the first part is rounded up."""
    ids = sorted(set(patient_ids))
    if not ids:
        raise EmptyDatasetError("cannot split an empty cohort")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    frac = fractions[0] / (fractions[0] + fractions[1])
    n_first = min(len(ids), math.ceil(round(frac * len(ids), 9)))
    first = sorted(ids[i] for i in order[:n_first])
    second = sorted(ids[i] for i in order[n_first:])
    if not second:
        warnings.warn("patient split left the second partition empty", stacklevel=2)
    return first, second


def recommend(params: qnet.QNetworkParams, states) -> np.ndarray | int:
    """Greedy action(s); ties go to the lowest action id."""
    q = qnet.forward(params, states)
    if q.ndim == 1:
        return int(np.argmax(q))
    return np.argmax(q, axis=1)


def mean_td_error(params, transitions: TransitionSet, gamma: float, target_params=None) -> float:
    """Eval-mode mean squared TD error, bootstrapping from ``target_params``
    (defaults to ``params`` itself)."""
    loss, _ = qnet.td_loss(params, target_params if target_params is not None else params, transitions, gamma)
    return loss


def train_dqn(
    transitions: TransitionSet,
    val_transitions: TransitionSet | None,
    cfg: TrainConfig,
    *,
    val_loss_fn: Callable[[qnet.QNetworkParams, int], float] | None = None,
    on_iteration: Callable[[int, qnet.QNetworkParams, qnet.QNetworkParams], None] | None = None,
    stop_reason_at_max: str = "max_iterations",
) -> tuple[qnet.QNetworkParams, TrainReport]:
    """Run the batch DQN loop.

    Every iteration samples a minibatch with replacement, builds fixed
    targets from the target network, and takes one Adam step on the TD loss
    with dropout active. The target network is re-synced every
    ``target_sync_period`` iterations. Every ``validation_eval_period``
    iterations (and at the last one) the eval-mode TD error on
    ``val_transitions`` is recorded; training stops once it has not improved
    for ``early_stop_patience`` iterations.

    ``val_loss_fn(params, iteration)`` replaces the validation TD error,
    ``on_iteration(k, params, target_params)`` is called after each update.
    """
    cfg.validate()
    if len(transitions) == 0:
        raise EmptyDatasetError("no training transitions")
    early = cfg.early_stop_patience is not None
    if early and val_loss_fn is None and (val_transitions is None or len(val_transitions) == 0):
        raise EmptyDatasetError("early stopping needs validation transitions")
    if transitions.states.shape[1] < 1:
        raise ShapeError("transitions have empty states")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    n_actions = int(transitions.actions.max()) + 1
    if val_transitions is not None and len(val_transitions):
        n_actions = max(n_actions, int(val_transitions.actions.max()) + 1)
    if cfg.n_actions is not None:
        if cfg.n_actions < n_actions:
            raise ConfigError(f"n_actions={cfg.n_actions} but action id {n_actions - 1} appears in the data")
        n_actions = cfg.n_actions
    init_seed = int(seeds[0].generate_state(1)[0])
    params = qnet.init(transitions.states.shape[1], n_actions, init_seed, cfg.hidden_sizes, cfg.dropout)
    return _run(params, transitions, val_transitions, cfg, seeds, val_loss_fn, on_iteration, stop_reason_at_max)


def _run(params, transitions, val_transitions, cfg, seeds, val_loss_fn, on_iteration, stop_reason_at_max):
    t0 = time.perf_counter()
    sample_rng = np.random.default_rng(seeds[1])
    mask_rng = np.random.default_rng(seeds[2])
    target = params.copy()
    adam = qnet.AdamState.zeros_like(params, alpha=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    report = TrainReport(iterations_run=0, stop_reason=stop_reason_at_max)
    have_val = val_transitions is not None and len(val_transitions) > 0
    n = len(transitions)
    bs = cfg.minibatch_size

    def evaluate(k: int) -> None:
        if val_loss_fn is not None:
            err = float(val_loss_fn(params, k))
        elif have_val:
            err = mean_td_error(params, val_transitions, cfg.gamma)
        else:
            err = mean_td_error(params, transitions, cfg.gamma)
        point = {"iteration": k, "td_error": err}
        if have_val:
            point["concordance"] = float(np.mean(recommend(params, val_transitions.states) == val_transitions.actions))
        report.curve.append(point)
        if err < report.best_td_error - cfg.min_delta:
            report.best_td_error = err
            report.best_iteration = k
        log.debug("iteration %d: td_error %.6g", k, err)

    k = 0
    while k < cfg.max_iterations:
        k += 1
        idx = sample_rng.integers(0, n, size=bs)
        batch = transitions.subset(idx)
        targets = qnet.td_targets(target, batch.rewards, batch.next_states, batch.terminal, cfg.gamma)
        masks = qnet.dropout_masks(params, bs, mask_rng) if params.dropout > 0 else None
        grads, loss = qnet.loss_and_grad(params, batch.states, batch.actions, targets, masks)
        if not math.isfinite(loss):
            raise DivergenceError(k, loss)
        qnet.adam_step(params, grads, adam)
        if k % cfg.target_sync_period == 0:
            target = params.copy()
        if on_iteration is not None:
            on_iteration(k, params, target)
        if k % cfg.validation_eval_period == 0 or k == cfg.max_iterations:
            evaluate(k)
            if not math.isfinite(report.curve[-1]["td_error"]):
                raise DivergenceError(k, report.curve[-1]["td_error"])
            if cfg.early_stop_patience is not None and k - report.best_iteration >= cfg.early_stop_patience:
                report.stop_reason = "early_stop"
                break
    report.iterations_run = k
    report.wall_clock_seconds = time.perf_counter() - t0
    params.metadata.update(
        iterations=k,
        final_td_error=report.curve[-1]["td_error"] if report.curve else None,
        seed=cfg.seed,
        stop_reason=report.stop_reason,
    )
    return params, report


def train_full_scheme(
    transitions: TransitionSet,
    cfg: TrainConfig,
    *,
    n_actions: int | None = None,
    val_loss_fn=None,
) -> tuple[qnet.QNetworkParams, TrainReport, TrainReport]:
    """Hold out patients for early stopping, then retrain on everything.

    Step A trains on 80% of the patients (by default) with early stopping on
    the other 20% and records the last iteration L. Step B trains a fresh
    network on all transitions for exactly L iterations. Returns the step-B
    model and both reports.
    """
    cfg.validate()
    ids = sorted(set(transitions.patient_ids.tolist()))
    if len(ids) < 2:
        raise EmptyDatasetError("need at least two patients to hold out a validation cohort")
    val_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    fit_ids, val_ids = split_patients(ids, (1.0 - cfg.validation_fraction, cfg.validation_fraction), val_seed)
    fit_set = transitions.for_patients(fit_ids)
    val_set = transitions.for_patients(val_ids)

    if n_actions is not None:
        cfg = replace(cfg, n_actions=n_actions)
    _, report_a = train_dqn(fit_set, val_set, cfg, val_loss_fn=val_loss_fn)
    L = report_a.iterations_run

    b_seed = int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    b_cfg = replace(cfg, early_stop_patience=None, max_iterations=L, seed=b_seed)
    params, report_b = train_dqn(transitions, None, b_cfg, stop_reason_at_max="fixed_L")
    params.metadata.update(seed=cfg.seed, L=L, step_a_stop_reason=report_a.stop_reason)
    return params, report_b, report_a

