import json

import jsonschema
import pytest

from regimenrl import cli
from regimenrl.config import OPTIONS, PipelineConfig, load_config, parse_config_text, stage_seed
from regimenrl.errors import ConfigError

TINY = [
    "--synth.n_patients", "24", "--synth.mean_encounters_per_patient", "6",
    "--train.hidden_sizes", "8,8", "--train.max_iterations", "30", "--train.minibatch_size", "16",
    "--train.early_stop_patience", "20", "--train.validation_eval_period", "10",
    "--prepare.min_count", "2", "--evaluate.k", "3", "--evaluate.importance_repeats", "1",
]


def run(tmp_path, *args):
    return cli.main([*args, "--workdir", str(tmp_path)])


class TestConfig:
    def test_every_option_roundtrips_through_text(self):
        cfg = PipelineConfig()
        back = parse_config_text(cfg.to_text())
        assert back == cfg.values

    def test_parse_errors_name_the_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 3\nnot a pair\n")
        with pytest.raises(ConfigError, match="unknown"):
            parse_config_text("train.nope = 1")
        with pytest.raises(ConfigError):
            parse_config_text("train.gamma = fast")

    def test_overrides_win_and_validate(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\ntrain.gamma = 0.5\nseed = 9\n")
        cfg = load_config(p, {"seed": "4"})
        assert cfg["train.gamma"] == 0.5 and cfg["seed"] == 4
        assert cfg.train_config().gamma == 0.5 == cfg.reward_params().gamma
        with pytest.raises(ConfigError):
            load_config(None, {"target": "kidney"})
        with pytest.raises(ConfigError):
            load_config(None, {"train.early_stop_patience": "0"})
        assert load_config(None, {"train.early_stop_patience": "none"})["train.early_stop_patience"] is None

    def test_stage_seeds_differ_and_are_stable(self):
        seeds = {stage_seed(7, s) for s in ("synth", "prepare", "train", "evaluate")}
        assert len(seeds) == 4
        assert stage_seed(7, "train") == stage_seed(7, "train") != stage_seed(8, "train")

    def test_paths_template_target(self, tmp_path):
        cfg = load_config(None, {"paths.workdir": str(tmp_path)})
        assert cfg.path("model", "bp") == tmp_path / "model_bp.rxqn"
        assert "train.learning_rate" in OPTIONS


class TestCommands:
    def test_pipeline_writes_schema_valid_report(self, tmp_path, capsys):
        assert run(tmp_path, "pipeline", *TINY) == 0
        out = capsys.readouterr().out
        assert "concordance=" in out
        report = json.loads((tmp_path / "reports/glycemia/eval_report.json").read_text())
        jsonschema.validate(report, cli.report_schema())
        for name in ("encounters.csv", "discrepancy_matrix.csv", "subgroups.csv", "train_report.json"):
            assert (tmp_path / "reports/glycemia" / name).is_file()
        train = json.loads((tmp_path / "reports/glycemia/train_report.json").read_text())
        assert train["step_b"]["iterations_run"] == train["L"]
        assert "wall_clock_seconds" not in train["step_a"]

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(d, "pipeline", *TINY, "--seed", "5") == 0
        for name in ("model_glycemia.rxqn", "cohort.jsonl", "reports/glycemia/eval_report.json",
                     "reports/glycemia/encounters.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_patients(self, tmp_path, capsys):
        with pytest.warns(UserWarning):
            assert run(tmp_path, "synth", "--patients", "0") == 0
        assert (tmp_path / "cohort.jsonl").read_text() == ""
        assert run(tmp_path, "prepare") == 1
        assert "EmptyDatasetError" in capsys.readouterr().err

    def test_missing_inputs_exit_2(self, tmp_path, capsys):
        assert run(tmp_path, "evaluate") == 2
        assert "not found" in capsys.readouterr().err
        assert run(tmp_path, "train", "--config", str(tmp_path / "absent.cfg")) == 2
        assert run(tmp_path, "synth", "--train.gamma", "2") == 2

    def test_corrupt_model_exit_2(self, tmp_path, capsys):
        assert run(tmp_path, "pipeline", *TINY) == 0
        (tmp_path / "model_glycemia.rxqn").write_bytes(b"junk")
        assert run(tmp_path, "evaluate", *TINY) == 2
        assert "model" in capsys.readouterr().err.lower()

    def test_unknown_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(tmp_path, "synth", "--no-such-flag", "1")
        assert exc.value.code == 2
