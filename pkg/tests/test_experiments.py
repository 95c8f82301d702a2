import json

import numpy as np
import pytest

from gestaltclosure.config.settings import (
    DatasetConfig,
    ExperimentPlan,
    NetConfig,
    PlanKind,
    StimulusConfig,
    TrainingConfig,
)
from gestaltclosure.core.datasets import make_white_noise
from gestaltclosure.core.errors import ConfigError
from gestaltclosure.core.experiments import (
    AMBIGUOUS,
    CLOSURE,
    NATURAL,
    NO_CLOSURE,
    ExperimentResult,
    ReplicateOutcome,
    analyze,
    brightness_condition,
    check_geometry,
    condition_data,
    condition_of,
    curve_signature,
    derive_verdicts,
    gather_replicates,
    model_id,
    reanalyze,
    replicate_of,
    resolve_layers,
    run_experiment,
    slope_signature,
    trajectory_rows,
    write_outputs,
)
from gestaltclosure.core.network import PENULTIMATE

from .conftest import edge_pattern, make_records


def plan_for(kind: PlanKind, **overrides) -> ExperimentPlan:
    base = dict(name=kind, replications=2, bootstrap_samples=200)
    base.update(overrides)
    return ExperimentPlan(**base)


def rows(*entries):
    return [
        {"model_id": mid, "condition": condition_of(mid), "final_val_accuracy": acc, **extra}
        for mid, acc, extra in entries
    ]


class TestIds:
    def test_model_ids(self):
        assert model_id("Natural", 3) == "Natural-r3"
        assert condition_of("Natural@e5-r12") == "Natural@e5"
        assert replicate_of("Natural@e5-r12") == 12
        assert brightness_condition(0.5) == "Natural@b0.5"
        assert brightness_condition(2.0) == "Natural@b2"


class TestSignatures:
    @pytest.mark.parametrize(
        "means, expected",
        [
            ([0.01, -0.02, 0.05], NO_CLOSURE),
            ([0.1, 0.2, 0.3], CLOSURE),
            ([0.3, 0.2, 0.4], AMBIGUOUS),
            ([0.2, 0.2, 0.3], AMBIGUOUS),
        ],
    )
    def test_curve_signature(self, means, expected):
        assert curve_signature(means, threshold=0.1) == expected

    @pytest.mark.parametrize(
        "lo, hi, expected",
        [(0.001, 0.01, CLOSURE), (-0.01, -0.001, AMBIGUOUS), (-0.001, 0.002, NO_CLOSURE), (None, None, AMBIGUOUS)],
    )
    def test_slope_signature(self, lo, hi, expected):
        assert slope_signature({"ci_lo": lo, "ci_hi": hi}) == expected


class TestSanityVerdict:
    def records(self):
        return (
            make_records("CD-r0", edge_pattern(0.02))
            + make_records("BD-r0", edge_pattern(0.0))
        )

    def test_signature_reproduced(self):
        plan = plan_for(PlanKind.SANITY, replications=1)
        training = rows(("CD-r0", 1.0, {}), ("BD-r0", 1.0, {}))
        verdict = derive_verdicts(plan, self.records(), training)
        assert verdict["plan"] == "SanityCD_BD"
        assert verdict["CD"] == CLOSURE and verdict["BD"] == NO_CLOSURE
        assert verdict["cd_increasing"] and verdict["bd_flat"] and verdict["cd_rise_ok"]
        assert verdict["valid"] and verdict["signature_reproduced"]

    def test_shallow_rise_is_not_a_reproduction(self):
        plan = plan_for(PlanKind.SANITY, replications=1)
        records = make_records("CD-r0", edge_pattern(0.002, offset=0.1)) + make_records(
            "BD-r0", edge_pattern(0.0)
        )
        training = rows(("CD-r0", 1.0, {}), ("BD-r0", 1.0, {}))
        verdict = derive_verdicts(plan, records, training)
        assert verdict["CD"] == CLOSURE and verdict["BD"] == NO_CLOSURE and verdict["valid"]
        assert not verdict["cd_rise_ok"]
        assert not verdict["signature_reproduced"]
        relaxed = derive_verdicts(plan.model_copy(update={"min_rise": 0.05}), records, training)
        assert relaxed["cd_rise_ok"] and relaxed["signature_reproduced"]

    def test_imperfect_validation_accuracy_invalidates(self):
        plan = plan_for(PlanKind.SANITY, replications=1)
        training = rows(("CD-r0", 0.97, {}), ("BD-r0", 1.0, {}))
        verdict = derive_verdicts(plan, self.records(), training)
        assert not verdict["valid"]
        assert verdict["invalid_replicates"] == ["CD-r0"]
        assert not verdict["signature_reproduced"]


class TestAblationVerdicts:
    def natural(self):
        return make_records("Natural-r0", edge_pattern(0.01)) + make_records("Natural-r1", edge_pattern(0.01))

    def test_flat_ablation(self):
        plan = plan_for(PlanKind.SHUFFLED_PIXELS)
        records = self.natural() + [
            r for mid in ("ShuffledPixels-r0", "ShuffledPixels-r1") for r in make_records(mid, edge_pattern(0.0))
        ]
        analysis = analyze(plan, records, [])
        verdict = analysis.verdict
        assert verdict[NATURAL] == CLOSURE
        assert verdict["ShuffledPixels"] == NO_CLOSURE
        assert verdict["interaction_significant"] and verdict["model_effect_significant"]
        assert verdict["effect_direction"] == "natural>ablated"
        assert verdict["pattern_reproduced"]
        assert analysis.stats["anova"]["balanced"]
        assert {c.model_id for c in analysis.curves} == {NATURAL, "ShuffledPixels"}
        assert len(analysis.replicate_curves) == 4

    def test_untrained_shows_weak_closure(self):
        plan = plan_for(PlanKind.UNTRAINED)
        weak = edge_pattern(0.001, offset=0.05)
        records = self.natural() + make_records("Untrained-r0", weak) + make_records("Untrained-r1", weak)
        verdict = derive_verdicts(plan, records)
        assert verdict["Untrained"] == "weak-closure"
        assert verdict["ablated_nonzero"] and verdict["ablated_weaker"]
        assert verdict["pattern_reproduced"]

    def test_failed_replicate_blocks_reproduction(self):
        plan = plan_for(PlanKind.SHUFFLED_PIXELS)
        records = make_records("Natural-r0", edge_pattern(0.01)) + make_records(
            "ShuffledPixels-r0", edge_pattern(0.0)
        )
        verdict = derive_verdicts(plan, records, failures={1: ["TrainingDivergedError: boom"]})
        assert verdict["failed_replicates"] == [1]
        assert not verdict["pattern_reproduced"]


class TestConvVsFC:
    def records(self):
        return (
            make_records("Conv-r0", edge_pattern(0.01))
            + make_records("Conv-r1", edge_pattern(0.011))
            + make_records("FC-r0", edge_pattern(0.001))
            + make_records("FC-r1", edge_pattern(-0.001))
        )

    def test_matched_replicates(self):
        training = rows(
            ("Conv-r0", 0.8, {}), ("FC-r0", 0.79, {"matched": True}),
            ("Conv-r1", 0.7, {}), ("FC-r1", 0.71, {"matched": True}),
        )
        analysis = analyze(plan_for(PlanKind.CONV_VS_FC), self.records(), training)
        verdict = analysis.verdict
        assert verdict["Conv"] == CLOSURE and verdict["FC"] == NO_CLOSURE
        assert verdict["matched"] and not verdict["inconclusive"]
        assert verdict["pattern_reproduced"]
        assert analysis.stats["Conv"]["slope"]["method"] == "replications"
        assert analysis.stats["accuracy"]["FC-r1"] == 0.71

    def test_unmatched_is_inconclusive(self):
        training = rows(("FC-r0", 0.5, {"matched": False}), ("FC-r1", 0.71, {"matched": True}))
        verdict = derive_verdicts(plan_for(PlanKind.CONV_VS_FC), self.records(), training)
        assert verdict["inconclusive"]
        assert verdict["unmatched_replicates"] == ["FC-r0"]
        assert not verdict["pattern_reproduced"]


def test_layerwise_verdict():
    records = []
    for r, (shallow, deep) in enumerate([(0.0005, 0.01), (-0.0005, 0.011)]):
        records += make_records(f"Natural-r{r}", edge_pattern(shallow), layer="conv2d_1")
        records += make_records(f"Natural-r{r}", edge_pattern(deep), layer=PENULTIMATE)
    verdict = derive_verdicts(plan_for(PlanKind.LAYER_WISE), records)
    assert verdict["conv2d_1"] == NO_CLOSURE
    assert verdict[PENULTIMATE] == CLOSURE
    assert verdict["closure_layers"] == [PENULTIMATE]
    assert verdict["pattern_reproduced"]


def test_trajectory_rows():
    records = (
        make_records("Natural@e5-r0", edge_pattern(0.0, offset=0.2))
        + make_records("Natural@e0-r0", edge_pattern(0.0, offset=0.1))
        + make_records("ShuffledPixels@e5-r1", edge_pattern(0.0))
    )
    table = trajectory_rows(records)
    assert [(row["condition"], row["epoch"], row["replicate"]) for row in table] == [
        ("Natural", 0, 0), ("Natural", 5, 0), ("ShuffledPixels", 5, 1)
    ]
    assert table[1]["mean_C"] == pytest.approx(0.2)
    analysis = analyze(plan_for(PlanKind.TRAJECTORY), records, [])
    assert analysis.trajectory == table
    assert "note" in analysis.verdict


def test_brightness_verdict():
    records = make_records("Natural@b0.5-r0", edge_pattern(0.01, noise=0.02)) + make_records(
        "Natural@b2-r0", edge_pattern(0.0, noise=0.02)
    )
    analysis = analyze(plan_for(PlanKind.BRIGHTNESS, replications=1), records, [])
    assert analysis.verdict["Natural@b0.5"] == CLOSURE
    assert analysis.verdict["Natural@b2"] == NO_CLOSURE
    assert analysis.stats["conditions"] == ["Natural@b0.5", "Natural@b2"]
    assert "effects" in analysis.stats["anova"]


def test_reanalysis_reproduces_the_verdict(tmp_path):
    plan = plan_for(PlanKind.SHUFFLED_PIXELS, replications=1)
    records = make_records("Natural-r0", edge_pattern(0.01, noise=0.02)) + make_records(
        "ShuffledPixels-r0", edge_pattern(0.0, noise=0.02)
    )
    training = rows(("Natural-r0", 0.8, {}), ("ShuffledPixels-r0", 0.4, {}))
    result = ExperimentResult(plan, records, training, {}, analyze(plan, records, training))
    written = write_outputs(result, tmp_path)
    assert {p.name for p in written} >= {"records.csv", "curves.csv", "stats.json", "verdict.json"}
    again = reanalyze(tmp_path)
    assert again.verdict == result.verdict
    assert again.curves[0].means == result.analysis.curves[0].means
    with open(tmp_path / "verdict.json") as f:
        assert json.load(f)["plan"] == "ShuffledPixels"


async def test_failed_replicate_is_recorded():
    def job(r: int) -> ReplicateOutcome:
        if r == 1:
            raise RuntimeError("disk full")
        return ReplicateOutcome(r, records=make_records(model_id("Natural", r), edge_pattern(0.0)))

    outcomes = await gather_replicates(job, replications=3, jobs=2)
    assert [o.replicate for o in outcomes] == [0, 1, 2]
    assert [o.success for o in outcomes] == [True, False, True]
    assert outcomes[1].errors == ["RuntimeError: disk full"]


class TestPlanChecks:
    def test_geometry_must_agree(self):
        plan = plan_for(
            PlanKind.WHITE_NOISE,
            stimulus=StimulusConfig(image_size=32),
            net=NetConfig(input_shape=(16, 16, 3)),
        )
        with pytest.raises(ConfigError) as info:
            check_geometry(plan, plan.net)
        assert info.value.field_paths == ["net.input_shape", "dataset.image_size"]

    def test_default_layers(self, tiny_conv):
        assert resolve_layers(plan_for(PlanKind.WHITE_NOISE), tiny_conv) == [PENULTIMATE]
        assert resolve_layers(plan_for(PlanKind.LAYER_WISE), tiny_conv) == [
            "conv2d_1", "conv2d_2", "conv2d_3", PENULTIMATE
        ]

    def test_unknown_layer(self, tiny_conv):
        with pytest.raises(ConfigError, match="dense_1"):
            resolve_layers(plan_for(PlanKind.LAYER_WISE, layers=["dense_1"]), tiny_conv)

    def test_condition_data(self):
        plan = plan_for(PlanKind.WHITE_NOISE, dataset=DatasetConfig(white_noise_count=10, image_size=8))
        natural = make_white_noise(12, 3, seed=0, size=8)
        noise, val = condition_data("WhiteNoise", plan, natural, seed=4)
        assert len(noise) == 10 and val is None
        train, val = condition_data("ShuffledLabels", plan, natural, seed=4)
        assert len(train) + len(val) == 12
        with pytest.raises(ConfigError):
            condition_data("Untrained", plan, natural, seed=4)


def desk_plan(kind: PlanKind, **overrides) -> ExperimentPlan:
    base = dict(
        name=kind,
        replications=1,
        bootstrap_samples=50,
        stimulus=StimulusConfig(
            image_size=32, vertex_distance=20.0, stroke_width=1.5, antialias_samples=2, offset=-2.0
        ),
        net=NetConfig(n_layers=3, n_classes=3, base_width=4, width_step=2, input_shape=(32, 32, 3)),
        dataset=DatasetConfig(classes=3, image_size=32, white_noise_count=12),
        training=TrainingConfig(epochs=1, batch_size=16),
    )
    base.update(overrides)
    return ExperimentPlan(**base)


@pytest.mark.slow
def test_untrained_run_end_to_end(tmp_path):
    natural = make_white_noise(24, 3, seed=0, size=32)
    [result] = run_experiment(desk_plan(PlanKind.UNTRAINED), out_dir=tmp_path, natural=natural)
    assert {condition_of(r.model_id) for r in result.records} == {NATURAL, "Untrained"}
    assert len(result.records) == 2 * 768
    assert (tmp_path / "models" / "Natural-r0" / "checkpoints" / "epoch_000.npz").exists()
    assert reanalyze(tmp_path).verdict == result.verdict


@pytest.mark.slow
def test_white_noise_sweep_end_to_end(tmp_path):
    natural = make_white_noise(24, 3, seed=0, size=32)
    plan = desk_plan(PlanKind.WHITE_NOISE, sweep_layers=[3, 5])
    results = run_experiment(plan, out_dir=tmp_path, natural=natural)
    assert [r.plan.net.n_layers for r in results] == [3, 5]
    assert (tmp_path / "classes3_layers5" / "verdict.json").exists()
    noise_rows = [row for row in results[0].training if row["condition"] == "WhiteNoise"]
    assert noise_rows[0]["note"] == "train accuracy only"
    assert np.isfinite([r.c for r in results[1].records]).all()
