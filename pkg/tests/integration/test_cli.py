"""
Command-line tests: exit codes, written artifacts and configuration precedence.
"""

import json

import pytest

import cli
from models.results import MetricsReport

TINY_CONFIG = {
    "model": {"dims": {"token_emb": 8, "enc_hidden": 8, "action_emb": 4, "visual_channels": 8,
                       "n_filters": 2, "dec_hidden": 16, "dropout": 0.0}},
    "train": {"epochs": 1, "batch_size": 8},
    "limits": {"max_steps": 4, "subgoal_max_steps": 3},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def test_no_command_is_a_usage_error():
    assert cli.main([]) == 2


def test_unknown_command_is_a_usage_error():
    assert cli.main(["fly"]) == 2


def test_eval_requires_checkpoint(tiny_dataset):
    assert cli.main(["eval", "--data", str(tiny_dataset)]) == 2


def test_missing_dataset_is_a_usage_error(tmp_path):
    assert cli.main(["replay-expert", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "out")]) == 2


def test_missing_config_file_is_a_usage_error(tmp_path):
    assert cli.main(["replay-expert", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_unknown_ablation_row(tiny_dataset, tmp_path):
    assert cli.main(["ablate", "--data", str(tiny_dataset), "--rows", "a,zz", "--out", str(tmp_path)]) == 2


def test_flags_override_config_file(config_file):
    args = cli.build_parser().parse_args(
        ["train", "--config", str(config_file), "--epochs", "3", "--no-ocl", "--seed", "4",
         "--stream-inputs", "G+I,G"])
    config = cli.resolve_config(args)
    assert config.train.epochs == 3
    assert config.train.batch_size == 8
    assert config.model.ocl is False
    assert config.model.factorized is True
    assert config.model.seed == 4
    assert config.model.dims.dec_hidden == 16
    assert (config.model.stream_inputs.ipm.value, config.model.stream_inputs.apm.value) == ("G+I", "G")


def test_seed_is_the_master_seed_for_gen_data():
    args = cli.build_parser().parse_args(["gen-data", "--seed", "9"])
    config = cli.resolve_config(args)
    assert config.dataset.master_seed == 9
    assert config.model.seed == 0


def test_gen_data_then_replay(tmp_path, capsys):
    data = tmp_path / "data"
    code = cli.main(["gen-data", "--out", str(data), "--seed", "1",
                     "--train-episodes", "2", "--seen-episodes", "1", "--unseen-episodes", "1"])
    assert code == 0
    assert "Manifest hash" in capsys.readouterr().out
    assert (data / "manifest.json").exists()
    assert json.loads((data / "config.json").read_text())["dataset"]["master_seed"] == 1

    out = tmp_path / "replay"
    assert cli.main(["replay-expert", "--data", str(data), "--out", str(out)]) == 0
    report = json.loads((out / "expert_report.json").read_text())
    assert report["episodes"] == 4
    assert report["task_sr"] == 1.0
    assert (out / "run.log").exists()


def test_train_eval_and_subgoal_eval(tiny_dataset, config_file, tmp_path):
    run = tmp_path / "train"
    assert cli.main(["train", "--data", str(tiny_dataset), "--config", str(config_file), "--out", str(run)]) == 0
    assert (run / "model.ckpt").exists()
    assert (run / "metrics.csv").exists()

    evaluated = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(tiny_dataset), "--config", str(config_file), "--checkpoint", str(run),
                     "--limit", "1", "--out", str(evaluated), "--table"]) == 0
    report = MetricsReport.model_validate_json((evaluated / "report.json").read_text())
    assert report.splits["valid_seen"].episodes == 1
    assert (evaluated / "report.csv").exists()
    assert list((evaluated / "logs" / "valid_unseen").glob("*.jsonl"))

    subgoals = tmp_path / "subgoals"
    assert cli.main(["subgoal-eval", "--data", str(tiny_dataset), "--config", str(config_file),
                     "--checkpoint", str(run / "model.ckpt"), "--limit", "1", "--splits", "valid_seen",
                     "--no-evasion", "--out", str(subgoals)]) == 0
    saved = MetricsReport.model_validate_json((subgoals / "subgoals.json").read_text())
    assert len(saved.subgoals["valid_seen"]) == 7

