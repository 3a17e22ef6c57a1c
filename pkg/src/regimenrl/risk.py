"""Sex-specific 10-year general cardiovascular risk (Framingham profile).

Coefficients are those of the lipid-based general CVD model (D'Agostino et
al., Circulation 2008). The risk is

    100 * (1 - S0 ** exp(L - L_mean))

where L is the sex-specific linear predictor over ln(age), ln(TC), ln(HDL),
ln(SBP) (treated or untreated coefficient), smoking and diabetes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

from .errors import RiskDomainError


@dataclass(frozen=True)
class SexCoefficients:
    ln_age: float
    ln_total_cholesterol: float
    ln_hdl: float
    ln_sbp_untreated: float
    ln_sbp_treated: float
    smoker: float
    diabetic: float
    baseline_survival: float
    mean_linear_predictor: float


@dataclass(frozen=True)
class FrsCoefficients:
    male: SexCoefficients
    female: SexCoefficients

    def for_sex(self, sex: str) -> SexCoefficients:
        if sex == "male":
            return self.male
        if sex == "female":
            return self.female
        raise ValueError(f"unknown sex {sex!r}")

    def to_dict(self) -> dict:
        return {"male": asdict(self.male), "female": asdict(self.female)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "FrsCoefficients":
        return cls(male=SexCoefficients(**obj["male"]), female=SexCoefficients(**obj["female"]))


DEFAULT_COEFFICIENTS = FrsCoefficients(
    male=SexCoefficients(
        ln_age=3.06117,
        ln_total_cholesterol=1.12370,
        ln_hdl=-0.93263,
        ln_sbp_untreated=1.93303,
        ln_sbp_treated=1.99881,
        smoker=0.65451,
        diabetic=0.57367,
        baseline_survival=0.88936,
        mean_linear_predictor=23.9802,
    ),
    female=SexCoefficients(
        ln_age=2.32888,
        ln_total_cholesterol=1.20904,
        ln_hdl=-0.70833,
        ln_sbp_untreated=2.76157,
        ln_sbp_treated=2.82263,
        smoker=0.52873,
        diabetic=0.69154,
        baseline_survival=0.95012,
        mean_linear_predictor=26.1931,
    ),
)


def load_coefficients(path) -> FrsCoefficients:
    """Load an override coefficient file (JSON, same field names as the dataclasses)."""
    return FrsCoefficients.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FrsInput:
    age: float
    sex: str
    total_cholesterol: float
    hdl: float
    sbp: float
    bp_treated: bool
    smoker: bool
    diabetic: bool = True


def linear_predictor(x: FrsInput, coef: FrsCoefficients = DEFAULT_COEFFICIENTS) -> float:
    for name in ("age", "total_cholesterol", "hdl", "sbp"):
        v = getattr(x, name)
        if not (v > 0 and math.isfinite(v)):
            raise RiskDomainError(f"{name}={v!r} must be finite and > 0")
    c = coef.for_sex(x.sex)
    sbp_coef = c.ln_sbp_treated if x.bp_treated else c.ln_sbp_untreated
    return (
        c.ln_age * math.log(x.age)
        + c.ln_total_cholesterol * math.log(x.total_cholesterol)
        + c.ln_hdl * math.log(x.hdl)
        + sbp_coef * math.log(x.sbp)
        + c.smoker * float(x.smoker)
        + c.diabetic * float(x.diabetic)
    )


def frs_risk(x: FrsInput, coef: FrsCoefficients = DEFAULT_COEFFICIENTS) -> float:
    """10-year general CVD risk in percent."""
    c = coef.for_sex(x.sex)
    lp = linear_predictor(x, coef)
    return 100.0 * (1.0 - c.baseline_survival ** math.exp(lp - c.mean_linear_predictor))


def frs_delta(before: FrsInput, after: FrsInput, coef: FrsCoefficients = DEFAULT_COEFFICIENTS) -> float:
    """Risk reduction in percentage points (positive when risk falls)."""
    if before.sex != after.sex:
        raise ValueError("frs_delta needs inputs of the same sex")
    return frs_risk(before, coef) - frs_risk(after, coef)
