import json

import pytest
from pydantic import ValidationError

from gestaltclosure.cli import PLANS_DIR
from gestaltclosure.config.settings import (
    AugmentationConfig,
    ExperimentPlan,
    Head,
    NetConfig,
    NetKind,
    PlanKind,
    Settings,
    TrainingConfig,
    TrainRunConfig,
    load_config_file,
)
from gestaltclosure.core.errors import ConfigError


class TestNetConfig:
    def test_head_defaults_follow_class_count(self):
        assert NetConfig(n_classes=2).head == Head.SIGMOID
        assert NetConfig(n_classes=2).output_units == 1
        assert NetConfig(n_classes=6).head == Head.SOFTMAX
        assert NetConfig(n_classes=6).output_units == 6

    @pytest.mark.parametrize(
        "field, value",
        [("n_layers", 4), ("n_classes", 5), ("penultimate_width", 256)],
    )
    def test_rejects_unsupported_values(self, field, value):
        with pytest.raises(ValidationError):
            NetConfig(**{field: value})

    def test_sigmoid_head_needs_two_classes(self):
        with pytest.raises(ValidationError):
            NetConfig(n_classes=3, head="sigmoid")

    def test_input_too_small_for_pooling(self):
        with pytest.raises(ValidationError, match="too small"):
            NetConfig(n_layers=7, input_shape=(64, 64, 3))

    def test_widths_grow_by_step(self):
        assert NetConfig(n_layers=5, base_width=8, width_step=4).widths == [8, 12, 16, 20, 24]

    def test_learning_rate_defaults_by_kind(self):
        assert NetConfig().default_learning_rate() == 0.001
        assert NetConfig(kind=NetKind.FULLY_CONNECTED).default_learning_rate() == 0.0001


def test_stimulus_training_skips_augmentation_unless_asked():
    training = TrainingConfig()
    assert training.augmentation_for("cd") == AugmentationConfig.disabled()
    assert training.augmentation_for("natural").horizontal_flip
    assert TrainingConfig(augment_stimuli=True).augmentation_for("bd").horizontal_flip


def test_translation_range_bounds():
    with pytest.raises(ValidationError):
        AugmentationConfig(translation_range=0.5)


class TestConfigFiles:
    def test_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('seed = 7\n[net]\nn_layers = 5\n[training]\nepochs = 3\n')
        run = load_config_file(path, TrainRunConfig)
        assert run.seed == 7
        assert run.net.n_layers == 5
        assert run.training.epochs == 3

    def test_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 3\ndataset:\n  kind: white_noise\n")
        assert load_config_file(path, TrainRunConfig).dataset.kind == "white_noise"

    def test_json(self, tmp_path):
        path = tmp_path / "plan.json"
        path.write_text(json.dumps({"name": "LayerWise", "replications": 2}))
        plan = load_config_file(path, ExperimentPlan)
        assert plan.name == PlanKind.LAYER_WISE
        assert plan.layers is None

    def test_validation_error_names_field_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[net]\nn_layers = 4\n")
        with pytest.raises(ConfigError) as info:
            load_config_file(path, TrainRunConfig)
        assert "net.n_layers" in info.value.field_paths
        assert "net.n_layers" in str(info.value)

    def test_unsupported_suffix(self, tmp_path):
        path = tmp_path / "plan.ini"
        path.write_text("x")
        with pytest.raises(ConfigError, match="Unsupported"):
            load_config_file(path, ExperimentPlan)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(tmp_path / "nope.toml", ExperimentPlan)

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[net\n")
        with pytest.raises(ConfigError, match="Cannot parse"):
            load_config_file(path, ExperimentPlan)


@pytest.mark.parametrize("path", sorted(PLANS_DIR.glob("*.toml")), ids=lambda p: p.stem)
def test_bundled_plans_validate(path):
    plan = load_config_file(path, ExperimentPlan)
    assert plan.replications >= 1
    assert plan.dataset.classes == plan.net.n_classes


REPLICATIONS = {
    "sanity": 5,
    "white_noise": 7,
    "shuffled_pixels": 7,
    "shuffled_labels": 7,
    "untrained": 7,
    "conv_vs_fc": 7,
    "layerwise": 7,
    "trajectory": 3,
    "brightness": 3,
}


@pytest.mark.parametrize("stem, expected", sorted(REPLICATIONS.items()))
def test_bundled_plan_replications(stem, expected):
    assert load_config_file(PLANS_DIR / f"{stem}.toml", ExperimentPlan).replications == expected


def test_bundled_plans_cover_every_kind():
    kinds = {load_config_file(p, ExperimentPlan).name for p in PLANS_DIR.glob("*.toml")}
    assert kinds == set(PlanKind)


def test_expand_sweeps():
    plan = ExperimentPlan(name="ShuffledPixels", sweep_classes=[2, 6], sweep_layers=[3, 5])
    subs = plan.expand_sweeps()
    assert [(p.net.n_classes, p.net.n_layers) for p in subs] == [(2, 3), (2, 5), (6, 3), (6, 5)]
    assert subs[0].net.head == Head.SIGMOID
    assert all(p.dataset.classes == p.net.n_classes for p in subs)
    assert all(not p.sweep_classes and not p.sweep_layers for p in subs)


def test_expand_without_sweeps_is_identity():
    plan = ExperimentPlan(name="Untrained")
    (only,) = plan.expand_sweeps()
    assert only.model_dump() == plan.model_dump()


def test_settings_read_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("GCL_DATA_DIR", str(tmp_path))
    monkeypatch.setenv("GCL_JOBS", "4")
    monkeypatch.setenv("GCL_STROKE_WIDTH", "2.5")
    s = Settings()
    assert s.data_dir == tmp_path
    assert s.jobs == 4
    assert s.stimulus_config().stroke_width == 2.5


def test_precision_setting_fills_unset_net_precision(monkeypatch):
    monkeypatch.setenv("GCL_PRECISION", "float64")
    s = Settings()
    assert s.with_precision(NetConfig()).precision == "float64"
    assert s.with_precision(NetConfig(precision="float32")).precision == "float32"


def test_stroke_settings_fill_unset_stimulus_fields(monkeypatch):
    monkeypatch.setenv("GCL_STROKE_WIDTH", "2.5")
    monkeypatch.setenv("GCL_ANTIALIAS_SAMPLES", "3")
    s = Settings()
    filled = s.with_stimulus(ExperimentPlan(name="SanityCD_BD").stimulus)
    assert (filled.stroke_width, filled.antialias_samples) == (2.5, 3)
    partial = ExperimentPlan.model_validate({"name": "SanityCD_BD", "stimulus": {"stroke_width": 6.0}})
    filled = s.with_stimulus(partial.stimulus)
    assert (filled.stroke_width, filled.antialias_samples) == (6.0, 3)
    assert filled.image_size == 150
