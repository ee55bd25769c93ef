"""
Tests for the command line in app.py
"""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

import app
from data_manager import config_hash
from ml_engine.attention import ScoreMatrix
from ml_engine.gradcheck import GradcheckResult


def run_dir(output_dir, command):
    matches = sorted(Path(output_dir).glob(f"qkcv-{command}-*"))
    assert len(matches) == 1, matches
    return matches[0]


@pytest.fixture
def small_config(write_config, small_run_document):
    return write_config(small_run_document)


class TestUsage:
    """Exit codes for usage and library errors."""

    def test_unknown_flag(self, temp_data_dir):
        assert app.run_cli(["train", "--no-such-flag", "--output-dir", temp_data_dir]) == 2

    def test_missing_command(self):
        assert app.run_cli([]) == 2

    def test_evaluate_requires_checkpoint(self, temp_data_dir):
        assert app.run_cli(["evaluate", "--output-dir", temp_data_dir]) == 2

    def test_config_error(self, small_config, temp_data_dir, capsys):
        code = app.run_cli(["train", "--config", small_config, "--set", "model.variant=v9",
                            "--output-dir", temp_data_dir])
        assert code == 1
        assert "v9" in capsys.readouterr().err

    def test_missing_checkpoint(self, small_config, temp_data_dir, capsys):
        code = app.run_cli(["evaluate", "--config", small_config, "--checkpoint",
                            str(Path(temp_data_dir) / "nowhere"), "--output-dir", temp_data_dir])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    @pytest.mark.parametrize("override", ["model.quantiles=[a,b]", "model.variant=[", "data.boundaries=[x,y]"])
    def test_malformed_override(self, small_config, temp_data_dir, capsys, override):
        code = app.run_cli(["train", "--config", small_config, "--set", override, "--output-dir", temp_data_dir])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_malformed_csv(self, small_run_document, write_config, temp_data_dir, capsys):
        path = Path(temp_data_dir) / "broken.csv"
        path.write_text("entity_id,timestamp,target,category_0\nA,2021-01-01,3,\"cat_00\n")
        document = {**small_run_document, "data": {"source": "csv", "path": str(path),
                                                   "schema": {"static_columns": ["category_0"]}}}
        code = app.run_cli(["train", "--config", write_config(document, "broken.yaml"),
                            "--output-dir", temp_data_dir])
        assert code == 1
        assert "cannot parse" in capsys.readouterr().err

    def test_series_too_short(self, small_config, temp_data_dir):
        code = app.run_cli(["train", "--config", small_config, "--set", "synthetic.length=12",
                            "--output-dir", temp_data_dir])
        assert code == 1


class TestGradcheckCommand:
    """Tests for the gradient verification command."""

    def test_passes(self, temp_data_dir):
        assert app.run_cli(["gradcheck", "--seeds", "1", "--output-dir", temp_data_dir]) == 0
        frame = pd.read_csv(run_dir(temp_data_dir, "gradcheck") / "gradcheck.csv")
        assert frame["passed"].all()
        assert {"softmax", "layer_norm", "qkcv_v3"} <= set(frame["op"])

    def test_failure_names_the_op(self, temp_data_dir, monkeypatch, capsys):
        monkeypatch.setattr(app, "run_gradcheck", lambda seeds: [
            GradcheckResult("exp", 1e-9, 1e-6), GradcheckResult("softmax", 0.5, 1e-6),
        ])
        assert app.run_cli(["gradcheck", "--output-dir", temp_data_dir]) == 1
        err = capsys.readouterr().err
        assert "failed for: softmax" in err


class TestTrainAndEvaluate:
    """Tests for training, evaluation and run manifests."""

    def test_train_writes_artifacts(self, small_config, temp_data_dir):
        assert app.run_cli(["train", "--config", small_config, "--output-dir", temp_data_dir]) == 0
        directory = run_dir(temp_data_dir, "train")
        metrics = pd.read_csv(directory / "metrics.csv")
        assert list(metrics.columns) == ["run_id", "model", "variant", "mode", "wpe", "p50", "p90", "mae"]
        assert metrics["run_id"][0] == directory.name
        assert (directory / "history.csv").exists()
        assert (directory / "checkpoint" / "manifest.json").exists()

        manifest = json.loads((directory / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config_hash"] == config_hash(manifest["config"])
        assert small_config in manifest["inputs"]
        assert manifest["artifacts"] == ["checkpoint", "forecasts.csv", "history.csv", "metrics.csv"]

    def test_forecasts_reproduce_metrics(self, small_config, temp_data_dir):
        assert app.run_cli(["train", "--config", small_config, "--output-dir", temp_data_dir]) == 0
        directory = run_dir(temp_data_dir, "train")
        forecasts = pd.read_csv(directory / "forecasts.csv")
        assert list(forecasts.columns) == ["entity_id", "start", "step", "y", "p50", "p90"]
        assert sorted(forecasts["step"].unique()) == [0, 1, 2, 3]
        assert len(forecasts) % 4 == 0
        wpe = (forecasts["p50"] - forecasts["y"]).abs().sum() / forecasts["y"].abs().sum()
        assert wpe == pytest.approx(pd.read_csv(directory / "metrics.csv")["wpe"][0], rel=1e-12)
        profile = forecasts.groupby("step")[["y", "p50", "p90"]].mean()
        assert profile.shape == (4, 3) and np.isfinite(profile.to_numpy()).all()

    def test_same_seed_same_bytes(self, small_config, temp_data_dir):
        outputs = [Path(temp_data_dir) / "a", Path(temp_data_dir) / "b"]
        for output in outputs:
            assert app.run_cli(["train", "--config", small_config, "--seed", "7",
                                "--output-dir", str(output)]) == 0
        first, second = (run_dir(o, "train") for o in outputs)
        assert first.name == second.name
        assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
        assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()

    def test_seed_lands_in_config(self, small_config, temp_data_dir):
        app.run_cli(["train", "--config", small_config, "--seed", "7", "--output-dir", temp_data_dir])
        manifest = json.loads((run_dir(temp_data_dir, "train") / "manifest.json").read_text())
        assert manifest["seed"] == 7 and manifest["config"]["optim"]["seed"] == 7

    def test_evaluate_matches_training_metrics(self, small_config, temp_data_dir):
        assert app.run_cli(["train", "--config", small_config, "--set", "model.variant=v1",
                            "--set", "model.encoder=sce", "--output-dir", temp_data_dir]) == 0
        trained = run_dir(temp_data_dir, "train")
        assert app.run_cli(["evaluate", "--config", small_config, "--checkpoint", str(trained / "checkpoint"),
                            "--output-dir", temp_data_dir]) == 0
        evaluated = pd.read_csv(run_dir(temp_data_dir, "evaluate") / "metrics.csv")
        pd.testing.assert_frame_equal(pd.read_csv(run_dir(temp_data_dir, "evaluate") / "forecasts.csv"),
                                      pd.read_csv(trained / "forecasts.csv"))
        expected = pd.read_csv(trained / "metrics.csv")
        assert evaluated["variant"][0] == "v1"
        np.testing.assert_array_equal(evaluated[["wpe", "p50", "p90", "mae"]].to_numpy(),
                                      expected[["wpe", "p50", "p90", "mae"]].to_numpy())

    def test_output_root_from_environment(self, small_config, temp_data_dir, monkeypatch):
        monkeypatch.setenv("QKCV_OUTPUT_ROOT", temp_data_dir)
        assert app.run_cli(["gen-data", "--config", small_config]) == 0
        directory = run_dir(temp_data_dir, "gen-data")
        assert (directory / "data.csv").exists() and (directory / "vocabulary.json").exists()


class TestCSVRun:
    """A run over a user-supplied panel."""

    def test_train_from_generated_csv(self, small_config, small_run_document, write_config, temp_data_dir):
        assert app.run_cli(["gen-data", "--config", small_config, "--output-dir", temp_data_dir]) == 0
        data_dir = run_dir(temp_data_dir, "gen-data")
        document = dict(small_run_document)
        document["data"] = {
            "source": "csv", "path": str(data_dir / "data.csv"),
            "vocabulary_path": str(data_dir / "vocabulary.json"),
            "schema": {"static_columns": ["category_0"]},
        }
        document["model"] = {**document["model"], "variant": "v2", "encoder": "sce"}
        config = write_config(document, "csv_run.yaml")
        assert app.run_cli(["train", "--config", config, "--output-dir", temp_data_dir]) == 0
        manifest = json.loads((run_dir(temp_data_dir, "train") / "manifest.json").read_text())
        assert str(data_dir / "data.csv") in manifest["inputs"]


class TestExports:
    """Tests for attention and importance exports."""

    def test_export_attention(self, small_config, temp_data_dir):
        code = app.run_cli(["export-attention", "--config", small_config, "--set", "model.variant=v3",
                            "--set", "model.encoder=sce", "--max-windows", "5", "--output-dir", temp_data_dir])
        assert code == 0
        directory = run_dir(temp_data_dir, "export-attention")
        frame = pd.read_csv(directory / "scores_layer0.csv")
        assert len(frame) == 5 and frame.columns[0] == "sample"
        scores = ScoreMatrix.from_heatmap_frame(frame)
        assert scores.shape == (5, 2, 8, 8)
        embedding = pd.read_csv(directory / "static_embedding.csv")
        assert embedding.shape == (8, 1 + 8)
        modulation = pd.read_csv(directory / "modulation_layer0.csv")
        assert list(modulation.columns[:2]) == ["entity_id", "position"]
        for _, rows in modulation.groupby("entity_id"):
            assert list(rows["position"]) == list(range(8))
        assert "modulation_layer0.csv" in json.loads((directory / "manifest.json").read_text())["artifacts"]

    def test_export_time_constant_modulation(self, small_config, temp_data_dir):
        code = app.run_cli(["export-attention", "--config", small_config, "--set", "model.variant=v1",
                            "--set", "model.encoder=sce", "--max-windows", "5", "--output-dir", temp_data_dir])
        assert code == 0
        frame = pd.read_csv(run_dir(temp_data_dir, "export-attention") / "modulation_layer0.csv")
        assert list(frame.columns) == ["entity_id", "position"] + [f"h{h}_d{d}" for h in range(2) for d in range(4)]
        assert frame["entity_id"].is_unique and list(frame["entity_id"]) == sorted(frame["entity_id"])
        assert (frame["position"] == 0).all()
        assert len(frame) > 1

    def test_importance(self, small_config, temp_data_dir):
        code = app.run_cli(["importance", "--config", small_config, "--set", "model.variant=v1",
                            "--set", "model.encoder=sce", "--output-dir", temp_data_dir])
        assert code == 0
        frame = pd.read_csv(run_dir(temp_data_dir, "importance") / "importance.csv")
        assert list(frame["variable_name"]) == ["category_0"]
        assert frame["mean_weight"].sum() == pytest.approx(1.0)

    def test_importance_needs_selection_network(self, small_config, temp_data_dir, capsys):
        assert app.run_cli(["importance", "--config", small_config, "--output-dir", temp_data_dir]) == 1
        assert "sce" in capsys.readouterr().err


class TestFinetuneCommand:
    """Tests for the fine-tuning comparison."""

    def test_finetune_table(self, small_config, temp_data_dir):
        assert app.run_cli(["finetune", "--config", small_config, "--output-dir", temp_data_dir]) == 0
        directory = run_dir(temp_data_dir, "finetune")
        table = pd.read_csv(directory / "finetune.csv")
        assert list(table["mode"]) == ["frozen", "pl", "pl+qkcv"]
        assert table["trainable_params"][0] == 0
        assert table["trainable_params"][1] < table["trainable_params"][2]
        assert (directory / "base_checkpoint" / "manifest.json").exists()
        assert len(pd.read_csv(directory / "metrics.csv")) == 3

    def test_reuses_base_checkpoint(self, small_config, temp_data_dir):
        assert app.run_cli(["finetune", "--config", small_config, "--output-dir", temp_data_dir]) == 0
        base = run_dir(temp_data_dir, "finetune") / "base_checkpoint"
        other = Path(temp_data_dir) / "again"
        assert app.run_cli(["finetune", "--config", small_config, "--set",
                            f"finetune.base_checkpoint={base}", "--output-dir", str(other)]) == 0
        manifest = json.loads((run_dir(other, "finetune") / "manifest.json").read_text())
        assert str(base / "manifest.json") in manifest["inputs"]
