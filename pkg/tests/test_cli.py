import json

import pytest
from typer.testing import CliRunner

from gestaltclosure import cli as cli_module
from gestaltclosure.cli import CliFormat, app, resolve_plan_path
from gestaltclosure.core.checkpoint import Checkpoint, save_checkpoint
from gestaltclosure.core.closure import curves_by_model, read_records_csv, write_curves_csv
from gestaltclosure.core.errors import ConfigError
from gestaltclosure.core.network import build_network
from gestaltclosure.core.stimuli import ExportFormat, read_manifest

from .conftest import edge_pattern, make_records

runner = CliRunner()

SMALL_STIMULUS = """\
image_size = 32
vertex_distance = 20.0
stroke_width = 1.5
antialias_samples = 2
offset = -2.0
"""

TINY_TRAINING = """\
seed = 3

[net]
n_layers = 3
n_classes = 3
base_width = 4
width_step = 2
input_shape = [16, 16, 3]

[dataset]
kind = "white_noise"
classes = 3
white_noise_count = 8
image_size = 16

[training]
epochs = 1
batch_size = 4
"""


def invoke(*args):
    result = runner.invoke(app, ["--log-level", "WARNING", *map(str, args)])
    return result, " ".join(result.output.split())


@pytest.fixture
def stimulus_toml(tmp_path):
    path = tmp_path / "stimulus.toml"
    path.write_text(SMALL_STIMULUS)
    return path


@pytest.fixture
def stimulus_checkpoint(tmp_path, stimulus_conv):
    net = build_network(stimulus_conv, seed=0)
    return save_checkpoint(tmp_path / "ckpt.npz", Checkpoint.from_network(net, epoch=0))


def test_cli_format_maps_to_export_format():
    assert CliFormat.RAW.export_format == ExportFormat.RAW
    assert CliFormat.PNG.export_format == ExportFormat.PNG


class TestGenStimuli:
    def test_raw_export(self, tmp_path, stimulus_toml):
        out = tmp_path / "stimuli"
        result, text = invoke("gen-stimuli", "--out", out, "--format", "raw", "--config", stimulus_toml)
        assert result.exit_code == 0, text
        assert "768 triples written" in text
        rows = read_manifest(out / "manifest.csv")
        assert len(rows) == 992 and rows[0]["filename"].endswith(".f32")
        assert (out / "triples.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["format"] == "raw-f32"
        assert "triples.csv" in manifest["outputs"]

    def test_refuses_a_non_empty_directory(self, tmp_path, stimulus_toml):
        out = tmp_path / "stimuli"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        result, text = invoke("gen-stimuli", "--out", out, "--config", stimulus_toml)
        assert result.exit_code == 1
        assert "--force" in text
        assert [p.name for p in out.iterdir()] == ["keep.txt"]

    def test_rerun_from_a_manifest_keeps_recorded_options(self, tmp_path, stimulus_toml):
        first = tmp_path / "first"
        result, text = invoke(
            "gen-stimuli", "--out", first, "--format", "raw", "--strict-position", "--seed", "5",
            "--config", stimulus_toml,
        )
        assert result.exit_code == 0, text
        again = tmp_path / "again"
        result, text = invoke("gen-stimuli", "--out", again, "--config", first / "manifest.json")
        assert result.exit_code == 0, text
        manifest = json.loads((again / "manifest.json").read_text())
        assert manifest["config"]["format"] == "raw-f32"
        assert manifest["config"]["strict_position"] is True
        assert manifest["config"]["image_size"] == 32
        assert manifest["seeds"] == {"triples": 5}
        assert read_manifest(again / "manifest.csv")[0]["filename"].endswith(".f32")
        assert (again / "triples.csv").read_bytes() == (first / "triples.csv").read_bytes()

    def test_unknown_format_is_a_usage_error(self, tmp_path):
        result, _ = invoke("gen-stimuli", "--out", tmp_path / "s", "--format", "bmp")
        assert result.exit_code == 2


class TestTrain:
    def test_white_noise_run(self, tmp_path):
        config = tmp_path / "train.toml"
        config.write_text(TINY_TRAINING)
        out = tmp_path / "run"
        result, text = invoke("train", "--config", config, "--out", out)
        assert result.exit_code == 0, text
        assert "Training Summary" in text
        assert (out / "training.csv").exists()
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_000.npz", "epoch_001.npz"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"]["seed"] == 3

        rerun, _ = invoke("train", "--config", out / "manifest.json", "--out", tmp_path / "rerun", "--seed", "4")
        assert rerun.exit_code == 0
        assert json.loads((tmp_path / "rerun" / "manifest.json").read_text())["seeds"]["seed"] == 4

    def test_invalid_config_names_the_field(self, tmp_path):
        config = tmp_path / "train.toml"
        config.write_text(TINY_TRAINING.replace("n_layers = 3", "n_layers = 4"))
        result, text = invoke("train", "--config", config, "--out", tmp_path / "run")
        assert result.exit_code == 1
        assert "field: net.n_layers" in text
        assert not (tmp_path / "run").exists()


class TestClosure:
    def test_unknown_layer(self, tmp_path, stimulus_checkpoint):
        out = tmp_path / "closure"
        result, text = invoke(
            "closure", "--checkpoint", stimulus_checkpoint, "--layers", "conv2d_9", "--out", out
        )
        assert result.exit_code == 1
        assert "conv2d_9" in text and "fc_finale" in text
        assert not out.exists()

    def test_records_and_curves(self, tmp_path, stimulus_checkpoint, stimulus_toml):
        out = tmp_path / "closure"
        result, text = invoke(
            "closure", "--checkpoint", stimulus_checkpoint, "--layers", "conv2d_3,fc_finale",
            "--config", stimulus_toml, "--model-id", "m1", "--out", out,
        )
        assert result.exit_code == 0, text
        records = read_records_csv(out / "records.csv")
        assert len(records) == 2 * 768
        assert {r.layer_name for r in records} == {"conv2d_3", "fc_finale"}
        assert {r.model_id for r in records} == {"m1"}
        assert (out / "curves.csv").exists()
        assert "Mean closure (m1)" in text

    def test_rerun_from_a_manifest_keeps_stimulus_geometry(
        self, tmp_path, stimulus_checkpoint, stimulus_toml
    ):
        first = tmp_path / "first"
        result, text = invoke(
            "closure", "--checkpoint", stimulus_checkpoint, "--layers", "fc_finale",
            "--config", stimulus_toml, "--out", first,
        )
        assert result.exit_code == 0, text
        again = tmp_path / "again"
        result, text = invoke(
            "closure", "--checkpoint", stimulus_checkpoint, "--layers", "fc_finale",
            "--config", first / "manifest.json", "--out", again,
        )
        # The 32 px network rejects the default 150 px geometry.
        assert result.exit_code == 0, text
        assert json.loads((again / "manifest.json").read_text())["config"]["stimulus"]["image_size"] == 32
        assert (again / "records.csv").read_bytes() == (first / "records.csv").read_bytes()


class TestExperiment:
    def test_unknown_plan(self, tmp_path):
        result, text = invoke("experiment", "--plan", "nope", "--out", tmp_path / "x")
        assert result.exit_code == 1
        assert "Plan not found" in text and "sanity" in text

    def test_plan_stimulus_follows_stroke_settings(self, tmp_path, monkeypatch):
        seen = []
        monkeypatch.setattr(cli_module, "run_experiment", lambda plan, **kwargs: seen.append(plan) or [])
        monkeypatch.setattr(cli_module.settings, "stroke_width", 2.5)
        result, text = invoke("experiment", "--plan", "untrained", "--out", tmp_path / "x")
        assert result.exit_code == 0, text
        assert seen[0].stimulus.stroke_width == 2.5
        manifest = json.loads((tmp_path / "x" / "manifest.json").read_text())
        assert manifest["config"]["stimulus"]["stroke_width"] == 2.5

    def test_bundled_plans_resolve_by_name(self):
        assert resolve_plan_path("layerwise").name == "layerwise.toml"
        assert resolve_plan_path("sanity.toml").name == "sanity.toml"
        with pytest.raises(ConfigError):
            resolve_plan_path("missing")


def test_report_writes_svgs(tmp_path):
    records = make_records("Natural", edge_pattern(0.01, noise=0.02))
    source = write_curves_csv(list(curves_by_model(records, ci="t").values()), tmp_path / "curves.csv")
    result, text = invoke("report", source, "--out", tmp_path / "plots")
    assert result.exit_code == 0, text
    assert (tmp_path / "plots" / "curves.svg").exists()
    assert (tmp_path / "plots" / "manifest.json").exists()
