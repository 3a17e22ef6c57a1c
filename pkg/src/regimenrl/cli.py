"""Command-line entry point: synth, prepare, train, evaluate, pipeline.

Exit codes: 0 success, 1 runtime failure (including divergence), 2 usage or
I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import numpy as np

from . import cohort as co
from . import evaluator as ev
from . import preprocess as pp
from . import qnet
from .config import OPTIONS, PipelineConfig, load_config, stage_seed
from .errors import CohortParseError, ConfigError, EmptyDatasetError, ModelFileError, RegimenRLError, VocabularyMismatchError
from .risk import DEFAULT_COEFFICIENTS, load_coefficients
from .trainer import split_patients, train_full_scheme

log = logging.getLogger("regimenrl")


class UsageError(Exception):
    """Bad arguments or unreadable/missing input; exit code 2."""


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _clean(obj.item())
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(obj), sort_keys=True, indent=1, ensure_ascii=False, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def report_schema() -> dict:
    return json.loads(resources.files("regimenrl").joinpath("eval_report.schema.json").read_text(encoding="utf-8"))


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _coefficients(cfg: PipelineConfig):
    p = cfg.path("frs_coefficients")
    return load_coefficients(_need(p, "coefficient file")) if p is not None else DEFAULT_COEFFICIENTS


def _load_cohort(cfg: PipelineConfig) -> list[co.PatientRecord]:
    path = _need(cfg.path("cohort"), "cohort file")
    try:
        return co.read_cohort(path)
    except CohortParseError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: PipelineConfig) -> int:
    sc = cfg.synth_config()
    if sc.n_patients == 0:
        warnings.warn("n_patients is 0; writing an empty cohort", stacklevel=1)
    cohort, truth = co.generate_synthetic_cohort(sc)
    out = cfg.path("cohort")
    out.parent.mkdir(parents=True, exist_ok=True)
    co.write_cohort(cohort, out)
    co.write_ground_truth(truth.optimal, cfg.path("ground_truth"))
    n_enc = sum(len(r.encounters) for r in cohort)
    print(f"synth: {len(cohort)} patients, {n_enc} encounters -> {out}")
    return 0


def _prepared_cohort(cfg: PipelineConfig, cohort):
    if cfg["prepare.phenotype"]:
        cohort = co.phenotype_t2dm(cohort)
    if not cohort:
        raise EmptyDatasetError("no patients left after T2DM phenotyping")
    return pp.impute_cohort(cohort)


def cmd_prepare(cfg: PipelineConfig) -> int:
    coef = _coefficients(cfg)
    cohort = _prepared_cohort(cfg, _load_cohort(cfg))
    frac = cfg["prepare.train_fraction"]
    ids = [r.patient_id for r in cohort]
    if frac >= 1.0:
        train_ids, test_ids = sorted(ids), []
    else:
        train_ids, test_ids = split_patients(ids, (frac, 1.0 - frac), stage_seed(cfg["seed"], "prepare"))
    keep = set(train_ids)
    train = [r for r in cohort if r.patient_id in keep]
    for target in cfg.targets:
        vocab = pp.build_action_vocab(train, target, cfg["prepare.min_count"])
        ts, stats, params = pp.build_transitions(train, target, vocab, cfg.reward_params(), coef=coef)
        path = cfg.path("transitions", target)
        path.parent.mkdir(parents=True, exist_ok=True)
        pp.write_transitions(ts, path)
        pp.PreparedMeta(target, vocab, stats, params, train_ids, test_ids).write(cfg.path("prepared", target))
        n_enc = sum(len(r.encounters) for r in train)
        print(
            f"prepare[{target}]: {len(train)} train patients, {n_enc} encounters, {len(ts)} transitions, "
            f"|A|={len(vocab)}, reward mean={ts.rewards.mean():.4f} sd={ts.rewards.std():.4f}; "
            f"{len(test_ids)} test patients"
        )
    return 0


def _read_meta(cfg: PipelineConfig, target: str) -> pp.PreparedMeta:
    path = _need(cfg.path("prepared", target), "prepared metadata")
    try:
        return pp.PreparedMeta.read(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: unreadable metadata ({exc})") from None


def cmd_train(cfg: PipelineConfig) -> int:
    for target in cfg.targets:
        meta = _read_meta(cfg, target)
        try:
            ts = pp.read_transitions(_need(cfg.path("transitions", target), "transitions file"))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"unreadable transitions: {exc}") from None
        tc = cfg.train_config()
        params, report_b, report_a = train_full_scheme(ts, tc, n_actions=len(meta.vocab))
        params.feature_stats = meta.stats.to_dict()
        params.vocabulary = meta.vocab.to_dict()
        params.metadata.update(target=target, gamma=tc.gamma)
        model_path = cfg.path("model", target)
        model_path.parent.mkdir(parents=True, exist_ok=True)
        qnet.save(params, model_path)
        L = report_a.iterations_run
        reports = cfg.path("reports", target)
        dump_json({
            "target": target,
            "L": L,
            "step_a": report_a.to_dict(),
            "step_b": report_b.to_dict(),
            "config": {k[len("train."):]: cfg[k] for k in OPTIONS if k.startswith("train.")},
        }, reports / "train_report.json")
        lines = [f"target {target}: step A stopped at L={L} ({report_a.stop_reason}); "
                 f"best validation TD error {report_a.best_td_error:.6g} at iteration {report_a.best_iteration}"]
        lines += [f"  iteration {p['iteration']:>7d}  td_error {p['td_error']:.6g}"
                  + (f"  concordance {p['concordance']:.4f}" if "concordance" in p else "")
                  for p in report_a.curve]
        lines.append(f"step B: {report_b.iterations_run} iterations ({report_b.stop_reason})")
        (reports / "train_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"train[{target}]: L={L} stop={report_a.stop_reason} -> {model_path}")
    return 0


def _discrepancy_wide(cells: list[dict]) -> tuple[list[dict], list[str]]:
    rows_keys = sorted({c["clinician_regimen"] for c in cells})
    cols = sorted({c["policy_regimen"] for c in cells})
    grid = {(c["clinician_regimen"], c["policy_regimen"]): c["count"] for c in cells}
    return [{"clinician_regimen": r, **{c: grid.get((r, c), 0) for c in cols}} for r in rows_keys], cols


def cmd_evaluate(cfg: PipelineConfig) -> int:
    coef = _coefficients(cfg)
    cohort = None
    for target in cfg.targets:
        model_path = _need(cfg.path("model", target), "model file")
        try:
            model = qnet.load(model_path)
        except ModelFileError as exc:
            raise UsageError(f"{model_path}: {exc}") from None
        meta = _read_meta(cfg, target)
        if cohort is None:
            cohort = _prepared_cohort(cfg, _load_cohort(cfg))
        by_id = {r.patient_id: r for r in cohort}
        missing = [p for p in meta.test_patients if p not in by_id]
        if missing:
            raise VocabularyMismatchError(f"{len(missing)} test patients are absent from the cohort (e.g. {missing[0]})")
        test = [by_id[p] for p in meta.test_patients]
        pool = [by_id[p] for p in meta.train_patients] if cfg["evaluate.neighbor_pool"] == "train+test" else None
        result, pca, table = ev.evaluate_policy(
            model, test, k=cfg["evaluate.k"], variance_target=cfg["evaluate.variance_target"],
            pool_cohort=pool, expected_vocab=meta.vocab, coef=coef,
        )
        states = pp.FeatureStats.from_dict(model.feature_stats).standardize(table.raw_states)
        validity = None
        if cfg["evaluate.validity_check"]:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                validity = ev.imputation_validity_check(
                    pca.transform(states), table.actions,
                    {b: table.outcomes[b] for b in ev.VALIDITY_BIOMARKERS}, cfg["evaluate.k"],
                )
        importance = ev.permutation_importance(
            model, states, cfg["evaluate.importance_repeats"], stage_seed(cfg["seed"], "evaluate"),
        )
        report = {
            "target": target,
            "summary": result.summary,
            "validity": validity,
            "importance": [{"block": b, "score": s} for b, s in importance],
            "discrepancy": result.discrepancy,
            "subgroups": result.subgroups,
            "histogram": result.histogram,
            "model": {"L": model.metadata.get("L"), "iterations": model.metadata.get("iterations")},
            "config": {"k": cfg["evaluate.k"], "variance_target": cfg["evaluate.variance_target"],
                       "neighbor_pool": cfg["evaluate.neighbor_pool"]},
        }
        out = cfg.path("reports", target)
        dump_json(report, out / "eval_report.json")
        ev.write_csv(result.rows, out / "encounters.csv")
        ev.write_csv(result.discrepancy, out / "discrepancy_cells.csv",
                     ["clinician_regimen", "policy_regimen", "count", "mean_outcome_delta"])
        wide, cols = _discrepancy_wide(result.discrepancy)
        ev.write_csv(wide, out / "discrepancy_matrix.csv", ["clinician_regimen", *cols])
        ev.write_csv(result.subgroups, out / "subgroups.csv")
        ev.write_csv(result.histogram, out / "prescription_counts.csv")
        s = result.summary
        print(f"evaluate[{target}]: concordance={s['concordance']:.4f} "
              f"discrepant={s['n_discrepant']}/{s['n_encounters']} unsupported={s['n_unsupported']}")
    return 0


def cmd_pipeline(cfg: PipelineConfig) -> int:
    for step in (cmd_synth, cmd_prepare, cmd_train, cmd_evaluate):
        step(cfg)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("pipeline")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--seed", dest="seed", help="global seed")
    g.add_argument("--target", dest="target", help="glycemia, bp, cvd, multimorbidity or all")
    g.add_argument("--workdir", dest="paths.workdir", help="base directory for relative paths")
    g.add_argument("--patients", dest="synth.n_patients", help="alias for --synth.n_patients")
    g.add_argument("--threads", type=int, help="cap BLAS worker threads")
    g.add_argument("-v", "--verbose", action="store_true")
    keys = argparse.ArgumentParser(add_help=False)
    k = keys.add_argument_group("config keys")
    for key, opt in OPTIONS.items():
        if key in ("seed", "target", "paths.workdir"):
            continue
        k.add_argument(f"--{key}", dest=key, metavar=opt.kind.upper(), help=opt.help or f"default: {opt.default}")

    parser = argparse.ArgumentParser(prog="regimenrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common, keys], argument_default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = {k: v for k, v in vars(parser.parse_args(argv)).items() if v is not None}
    command = args.pop("command")
    config_path = args.pop("config", None)
    threads = args.pop("threads", None)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if config_path is not None and not Path(config_path).is_file():
            raise UsageError(f"config file not found: {config_path}")
        cfg = load_config(config_path, args)
        limiter = nullcontext()
        if threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=max(1, threads))
        with limiter:
            return COMMANDS[command](cfg)
    except (UsageError, ConfigError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RegimenRLError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
