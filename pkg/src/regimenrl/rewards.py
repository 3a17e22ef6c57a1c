"""Per-transition rewards for the four treatment targets.

All rewards are signed so that an improvement (lower A1c, lower SBP, lower
cardiovascular risk) is positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NotFittedError

COMPONENTS = ("glycemia", "bp", "cvd")


@dataclass
class RewardParams:
    a1c_threshold: float = 5.6
    a1c_sigma: float = 1.58
    sbp_threshold: float = 120.0
    sbp_sigma: float = 17.7
    gamma: float = 0.9
    # Standardization of component rewards for the multimorbidity target.
    component_mean: dict[str, float] | None = None
    component_sd: dict[str, float] | None = None

    def validate(self) -> None:
        if not (self.a1c_sigma > 0 and self.sbp_sigma > 0):
            raise ConfigError("reward sigmas must be > 0")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie in (0, 1)")

    @property
    def fitted(self) -> bool:
        return self.component_mean is not None and self.component_sd is not None

    def to_dict(self) -> dict:
        return {
            "a1c_threshold": self.a1c_threshold,
            "a1c_sigma": self.a1c_sigma,
            "sbp_threshold": self.sbp_threshold,
            "sbp_sigma": self.sbp_sigma,
            "gamma": self.gamma,
            "component_mean": self.component_mean,
            "component_sd": self.component_sd,
        }

    @classmethod
    def from_dict(cls, obj) -> "RewardParams":
        return cls(**obj)


def _severity_weighted_drop(x_t: float, x_next: float, threshold: float, sigma: float) -> float:
    if x_t >= threshold and x_next >= threshold:
        return (x_t - x_next) * (x_t - threshold) / sigma
    return 0.0


def glycemia_reward(a1c_t: float, a1c_next: float, params: RewardParams | None = None) -> float:
    p = params or RewardParams()
    return _severity_weighted_drop(a1c_t, a1c_next, p.a1c_threshold, p.a1c_sigma)


def bp_reward(sbp_t: float, sbp_next: float, params: RewardParams | None = None) -> float:
    p = params or RewardParams()
    return _severity_weighted_drop(sbp_t, sbp_next, p.sbp_threshold, p.sbp_sigma)


def cvd_reward(frs_t: float, frs_next: float) -> float:
    return frs_t - frs_next


def fit_component_stats(r_g, r_b, r_c, params: RewardParams) -> RewardParams:
    """Freeze per-component reward means and sds (from training transitions)."""
    means, sds = {}, {}
    for name, r in zip(COMPONENTS, (r_g, r_b, r_c)):
        r = np.asarray(r, dtype=float)
        if r.size == 0:
            raise ValueError("cannot fit reward stats on an empty set")
        means[name] = float(r.mean())
        sd = float(r.std())
        sds[name] = sd if sd > 0 else 1.0
    params.component_mean = means
    params.component_sd = sds
    return params


def multimorbidity_reward(r_g, r_b, r_c, params: RewardParams):
    """Average of the three standardized component rewards.

    Works elementwise on arrays as well as scalars.
    """
    if not params.fitted:
        raise NotFittedError("multimorbidity reward needs fitted component stats")
    total = 0.0
    for name, r in zip(COMPONENTS, (r_g, r_b, r_c)):
        total = total + (np.asarray(r, dtype=float) - params.component_mean[name]) / params.component_sd[name]
    out = total / 3.0
    return float(out) if np.ndim(out) == 0 else out
