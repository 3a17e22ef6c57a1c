"""Pipeline configuration as flat ``section.key = value`` text.

Every key has a default, a type inferred from the dataclass it feeds, and a
matching ``--section.key`` command-line override.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .cohort import DEFAULT_MISSINGNESS, TARGETS, SynthConfig
from .errors import ConfigError
from .rewards import RewardParams
from .trainer import TrainConfig

STAGES = ("synth", "prepare", "train", "evaluate")
NEIGHBOR_POOLS = ("test", "train+test")


def stage_seed(global_seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the global seed alone."""
    return int(np.random.SeedSequence([global_seed, STAGES.index(stage)]).generate_state(1)[0])


@dataclass
class Option:
    key: str
    default: Any
    parse: Callable[[str], Any]
    kind: str
    help: str = ""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional(inner: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.strip().lower() in ("none", "null", "") else inner(text)
    return parse


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


_SCALAR = {int: int, float: float, bool: _parse_bool, str: str}


def _parser_for(tp) -> tuple[Callable[[str], Any], str]:
    if tp in _SCALAR:
        return _SCALAR[tp], tp.__name__
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        inner = next(a for a in args if a is not type(None))
        p, kind = _parser_for(inner)
        return _parse_optional(p), f"{kind}|none"
    if origin is tuple and args and args[0] is int:
        return _parse_int_tuple, "int,int,..."
    raise TypeError(f"no config parser for {tp!r}")


def _options_from(prefix: str, cls, skip=()) -> list[Option]:
    hints = typing.get_type_hints(cls)
    out = []
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        parse, kind = _parser_for(hints[f.name])
        out.append(Option(f"{prefix}.{f.name}", default, parse, kind))
    return out


def _build_options() -> dict[str, Option]:
    opts = [
        Option("seed", 0, int, "int", "global seed; every stage derives its own seed from it"),
        Option("target", "glycemia", str, "str", "glycemia, bp, cvd, multimorbidity or all"),
        Option("paths.workdir", ".", str, "path", "relative paths below resolve against this directory"),
        Option("paths.cohort", "cohort.jsonl", str, "path"),
        Option("paths.ground_truth", "ground_truth.jsonl", str, "path"),
        Option("paths.transitions", "transitions_{target}.jsonl", str, "path"),
        Option("paths.prepared", "prepared_{target}.json", str, "path"),
        Option("paths.model", "model_{target}.rxqn", str, "path"),
        Option("paths.reports", "reports/{target}", str, "path"),
        Option("paths.frs_coefficients", None, _parse_optional(str), "path|none",
               "JSON file overriding the built-in risk-score coefficients"),
    ]
    opts += _options_from("synth", SynthConfig, skip=("seed", "missingness_rates"))
    opts += [Option(f"synth.missing_{k}", v, float, "float") for k, v in DEFAULT_MISSINGNESS.items()]
    opts += [
        Option("prepare.train_fraction", 0.6, float, "float"),
        Option("prepare.min_count", 5, int, "int", "regimens logged fewer times are folded into subsets"),
        Option("prepare.phenotype", True, _parse_bool, "bool"),
    ]
    opts += _options_from("reward", RewardParams, skip=("gamma", "component_mean", "component_sd"))
    opts += _options_from("train", TrainConfig, skip=("seed", "n_actions"))
    opts += [
        Option("evaluate.k", 10, int, "int"),
        Option("evaluate.variance_target", 0.90, float, "float"),
        Option("evaluate.neighbor_pool", "test", str, "str", "test or train+test"),
        Option("evaluate.importance_repeats", 5, int, "int"),
        Option("evaluate.validity_check", True, _parse_bool, "bool"),
    ]
    return {o.key: o for o in opts}


OPTIONS = _build_options()


@dataclass
class PipelineConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: o.default for k, o in OPTIONS.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in OPTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = OPTIONS[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        self.values[key] = value

    def update(self, pairs: Mapping[str, Any]) -> None:
        for k, v in pairs.items():
            self.set(k, v)

    @property
    def targets(self) -> list[str]:
        t = self["target"]
        return list(TARGETS) if t == "all" else [t]

    def validate(self) -> None:
        if self["target"] not in TARGETS and self["target"] != "all":
            raise ConfigError(f"target must be one of {TARGETS} or 'all', got {self['target']!r}")
        if self["evaluate.neighbor_pool"] not in NEIGHBOR_POOLS:
            raise ConfigError(f"evaluate.neighbor_pool must be one of {NEIGHBOR_POOLS}")
        if not (0.0 < self["prepare.train_fraction"] <= 1.0):
            raise ConfigError("prepare.train_fraction must lie in (0, 1]")
        if self["evaluate.k"] < 1:
            raise ConfigError("evaluate.k must be >= 1")
        if not (0.0 < self["evaluate.variance_target"] <= 1.0):
            raise ConfigError("evaluate.variance_target must lie in (0, 1]")
        if not (0 <= self["seed"] < 2**63):
            raise ConfigError("seed must be a non-negative 63-bit integer")
        self.synth_config().validate()
        self.reward_params().validate()
        self.train_config().validate()

    def path(self, name: str, target: str | None = None) -> Path:
        raw = self[f"paths.{name}"]
        if raw is None:
            return None
        p = Path(raw.format(target=target or self["target"]))
        return p if p.is_absolute() else Path(self["paths.workdir"]) / p

    def _section(self, prefix: str) -> dict[str, Any]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def synth_config(self) -> SynthConfig:
        sec = self._section("synth")
        missing = {k[len("missing_"):]: sec.pop(k) for k in list(sec) if k.startswith("missing_")}
        return SynthConfig(**sec, missingness_rates=missing, seed=stage_seed(self["seed"], "synth"))

    def reward_params(self) -> RewardParams:
        return RewardParams(**self._section("reward"), gamma=self["train.gamma"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._section("train"), seed=stage_seed(self["seed"], "train"))

    def to_text(self) -> str:
        lines = []
        for k in OPTIONS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in OPTIONS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = OPTIONS[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {key}: {exc}") from None
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg.update(overrides)
    cfg.validate()
    return cfg
