"""
Experiment harness: the sanity check, the data ablations, conv-vs-fully-connected,
layer-wise closure, training trajectories and brightness runs.

Every runner trains (or loads) its models per replicate, measures closure records on the
shared stimulus triples, and hands the records to `analyze`, which derives curves,
statistics and verdicts from records alone. Replicate r uses seed `base_seed + r`;
conditions compared within a replicate share that seed, the triples and the renderings.
"""

import asyncio
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..config.settings import (
    ExperimentPlan,
    NetConfig,
    NetKind,
    PlanKind,
    StimulusConfig,
    TrainingConfig,
    settings,
)
from .checkpoint import Checkpoint, load_checkpoint
from .closure import (
    ClosureCurve,
    ClosureRecord,
    closure_curve,
    closure_per_triple,
    closure_slope,
    embed_stimuli,
    read_records_csv,
    replication_interval,
    write_curves_csv,
    write_records_csv,
)
from .datasets import (
    Dataset,
    Task,
    derive_seed,
    load_natural,
    make_cd_bd_sets,
    make_white_noise,
    scale_brightness,
    shuffle_labels,
    shuffle_pixels,
    split_dataset,
    split_triples,
)
from .errors import (
    ArchitectureMismatchError,
    ConfigError,
    DatasetError,
    DegenerateSampleError,
    DesignError,
)
from .network import PENULTIMATE, build_network, probe_layer_names
from .stats import anova_two_way, t_test_one_sample
from .stimuli import StimulusSpec, Triple, build_triples, enumerate_specs, render_all
from .trainer import EpochCallback, TrainReport, train

logger = structlog.get_logger(__name__)

NATURAL = "Natural"
ABLATIONS = (
    PlanKind.WHITE_NOISE,
    PlanKind.SHUFFLED_PIXELS,
    PlanKind.UNTRAINED,
    PlanKind.SHUFFLED_LABELS,
)
FLAT_ABLATIONS = (PlanKind.WHITE_NOISE, PlanKind.SHUFFLED_PIXELS)

STREAM_ORDER = 1
STREAM_PIXELS = 2
STREAM_LABELS = 3
STREAM_NOISE = 4

TRAJECTORY_HEADER = ["condition", "replicate", "epoch", "layer", "mean_C"]

CLOSURE = "closure"
NO_CLOSURE = "no-closure"
AMBIGUOUS = "ambiguous"


# Shared inputs ----------------------------------------------------------


@dataclass
class StimulusBank:
    """The triples and their renderings, shared by every condition of a plan."""

    triples: List[Triple]
    images: Dict[StimulusSpec, np.ndarray]
    config: StimulusConfig

    @classmethod
    def build(cls, plan: ExperimentPlan) -> "StimulusBank":
        triples = build_triples(plan.triple_seed, strict_position=plan.strict_position)
        images = render_all(enumerate_specs(), plan.stimulus)
        logger.info("stimulus_bank_built", triples=len(triples), images=len(images))
        return cls(triples=triples, images=images, config=plan.stimulus)

    @staticmethod
    def specs_for(triples: Sequence[Triple]) -> List[StimulusSpec]:
        return list(dict.fromkeys(s for t in triples for s in t.members()))


def replicate_seed(plan: ExperimentPlan, replicate: int) -> int:
    return plan.base_seed + replicate


def model_id(condition: str, replicate: int) -> str:
    return f"{condition}-r{replicate}"


def condition_of(mid: str) -> str:
    return mid.rsplit("-r", 1)[0]


def replicate_of(mid: str) -> int:
    return int(mid.rsplit("-r", 1)[1])


def check_geometry(plan: ExperimentPlan, net_config: NetConfig) -> None:
    size = plan.stimulus.image_size
    problems = []
    if tuple(net_config.input_shape[:2]) != (size, size):
        problems.append("net.input_shape")
    if plan.dataset.image_size != size:
        problems.append("dataset.image_size")
    if problems:
        raise ConfigError(
            f"stimuli are {size}x{size} but {', '.join(problems)} disagree", problems
        )


def resolve_layers(plan: ExperimentPlan, net_config: NetConfig) -> List[str]:
    valid = probe_layer_names(net_config)
    if plan.layers is None:
        return valid if plan.name == PlanKind.LAYER_WISE else [PENULTIMATE]
    unknown = [name for name in plan.layers if name not in valid]
    if unknown:
        raise ConfigError(f"unknown layers {unknown}; valid layers: {valid}", ["layers"])
    return list(plan.layers)


def load_plan_dataset(plan: ExperimentPlan) -> Dataset:
    root = plan.dataset.root or settings.data_dir
    if root is None:
        raise DatasetError("no natural-image directory: set dataset.root or GCL_DATA_DIR")
    if plan.dataset.classes != plan.net.n_classes:
        raise ConfigError(
            f"dataset.classes={plan.dataset.classes} but net.n_classes={plan.net.n_classes}",
            ["dataset.classes", "net.n_classes"],
        )
    return load_natural(
        root,
        plan.dataset.classes,
        plan.dataset.per_class,
        resize=plan.dataset.image_size,
        seed=plan.split_seed,
        on_decode_error=plan.dataset.on_decode_error,
    )


def condition_data(
    condition: str, plan: ExperimentPlan, natural: Dataset, seed: int
) -> Tuple[Dataset, Optional[Dataset]]:
    """Train/validation sets for a training condition of replicate `seed`."""

    def split(ds: Dataset) -> Tuple[Dataset, Dataset]:
        return split_dataset(ds, plan.dataset.val_fraction, plan.split_seed)

    if condition == NATURAL:
        return split(natural)
    if condition == PlanKind.WHITE_NOISE.value:
        noise = make_white_noise(
            plan.dataset.white_noise_count,
            natural.label_arity,
            derive_seed(seed, STREAM_NOISE),
            size=plan.dataset.image_size,
        )
        return noise, None
    if condition == PlanKind.SHUFFLED_PIXELS.value:
        shuffled = shuffle_pixels(
            natural, derive_seed(seed, STREAM_PIXELS), per_image=plan.dataset.per_image_shuffle
        )
        return split(shuffled)
    if condition == PlanKind.SHUFFLED_LABELS.value:
        return split(shuffle_labels(natural, derive_seed(seed, STREAM_LABELS)))
    raise ConfigError(f"no training data for condition '{condition}'", ["name"])


# Training and measurement -----------------------------------------------


@dataclass
class TrainedModel:
    model_id: str
    condition: str
    replicate: int
    seed: int
    report: TrainReport
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def final(self) -> Checkpoint:
        return self.report.checkpoints[max(self.report.checkpoints)]

    def training_row(self) -> Dict[str, object]:
        return {
            "model_id": self.model_id,
            "condition": self.condition,
            "replicate": self.replicate,
            "seed": self.seed,
            "epochs_run": len(self.report.epochs),
            "epochs_configured": self.report.epochs_configured,
            "early_stopped": self.report.early_stopped,
            "final_train_accuracy": self.report.final_train_accuracy,
            "final_val_accuracy": self.report.final_val_accuracy,
            "validation_available": self.report.validation_available,
            "config_hash": self.report.config_hash,
            **self.extra,
        }


def _model_dir(out_dir: Optional[Path], name: str) -> Optional[Path]:
    return Path(out_dir) / "models" / name if out_dir is not None else None


def fit_model(
    plan: ExperimentPlan,
    condition: str,
    replicate: int,
    net_config: NetConfig,
    training: TrainingConfig,
    train_ds: Dataset,
    val_ds: Optional[Dataset],
    dataset_kind: str,
    out_dir: Optional[Path] = None,
    lr: Optional[float] = None,
    checkpoint_epochs: Optional[Sequence[int]] = None,
    on_epoch_end: Optional[EpochCallback] = None,
    artifact_name: Optional[str] = None,
) -> TrainedModel:
    seed = replicate_seed(plan, replicate)
    mid = model_id(condition, replicate)
    net = build_network(net_config, seed, debug=settings.debug)
    model_dir = _model_dir(out_dir, artifact_name or mid)
    logger.info("replicate_training", model_id=mid, seed=seed, examples=len(train_ds))
    report = train(
        net,
        train_ds,
        training.augmentation_for(dataset_kind),
        training.epochs,
        lr=lr if lr is not None else training.learning_rate,
        seed=derive_seed(seed, STREAM_ORDER),
        val=val_ds,
        batch_size=training.batch_size,
        rho=training.rho,
        epsilon=training.epsilon,
        checkpoint_epochs=checkpoint_epochs if checkpoint_epochs is not None else training.checkpoint_epochs,
        out_dir=model_dir,
        early_stop_val_accuracy=training.early_stop_val_accuracy,
        on_epoch_end=on_epoch_end,
    )
    if model_dir is not None:
        report.write_csv(model_dir / "training.csv")
    return TrainedModel(mid, condition, replicate, seed, report)


def measure(
    checkpoint: Checkpoint,
    mid: str,
    bank: StimulusBank,
    triples: Sequence[Triple],
    layers: Sequence[str],
) -> List[ClosureRecord]:
    """Closure records of one model, one layer at a time."""
    net = checkpoint.restore(debug=settings.debug)
    specs = bank.specs_for(triples)
    records: List[ClosureRecord] = []
    for layer in layers:
        embeddings = embed_stimuli(net, checkpoint, [layer], specs, model_id=mid, images=bank.images)
        records.extend(closure_per_triple(embeddings, triples, layer))
    return records


def _same_architecture(a: Checkpoint, b: Checkpoint) -> None:
    if a.config.model_dump(exclude={"n_classes", "head"}) != b.config.model_dump(
        exclude={"n_classes", "head"}
    ):
        raise ArchitectureMismatchError("baseline and ablated models differ in architecture")


# Replicates -------------------------------------------------------------


@dataclass
class ReplicateOutcome:
    replicate: int
    success: bool = True
    records: List[ClosureRecord] = field(default_factory=list)
    training: List[Dict[str, object]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)


ReplicateJob = Callable[[int], ReplicateOutcome]


async def gather_replicates(job: ReplicateJob, replications: int, jobs: int = 1) -> List[ReplicateOutcome]:
    """Run replicate jobs on a bounded thread pool; failures become unsuccessful outcomes."""
    loop = asyncio.get_running_loop()
    logger.info("replicates_started", replications=replications, jobs=jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        tasks = [loop.run_in_executor(pool, job, r) for r in range(replications)]
        results = await asyncio.gather(*tasks, return_exceptions=True)

    outcomes: List[ReplicateOutcome] = []
    for r, result in enumerate(results):
        if isinstance(result, BaseException):
            logger.error("replicate_failed", replicate=r, error=str(result))
            outcomes.append(
                ReplicateOutcome(
                    replicate=r, success=False, errors=[f"{type(result).__name__}: {result}"]
                )
            )
        else:
            logger.info("replicate_finished", replicate=r, records=len(result.records))
            outcomes.append(result)
    return outcomes


def run_replicates(job: ReplicateJob, replications: int, jobs: int = 1) -> List[ReplicateOutcome]:
    return asyncio.run(gather_replicates(job, replications, jobs))


# Results ----------------------------------------------------------------


@dataclass
class Analysis:
    curves: List[ClosureCurve]
    replicate_curves: List[ClosureCurve]
    stats: Dict[str, object]
    verdict: Dict[str, object]
    trajectory: List[Dict[str, object]] = field(default_factory=list)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    records: List[ClosureRecord]
    training: List[Dict[str, object]]
    failures: Dict[int, List[str]]
    analysis: Analysis

    @property
    def verdict(self) -> Dict[str, object]:
        return self.analysis.verdict


def _finish(plan: ExperimentPlan, outcomes: List[ReplicateOutcome]) -> ExperimentResult:
    records: List[ClosureRecord] = []
    training: List[Dict[str, object]] = []
    failures: Dict[int, List[str]] = {}
    for outcome in sorted(outcomes, key=lambda o: o.replicate):
        records.extend(outcome.records)
        training.extend(outcome.training)
        if not outcome.success:
            failures[outcome.replicate] = outcome.errors
    if not records:
        raise DegenerateSampleError(f"every replicate of {plan.name.value} failed: {failures}")
    analysis = analyze(plan, records, training, failures)
    logger.info("experiment_verdict", plan=plan.name.value, verdict=analysis.verdict)
    return ExperimentResult(plan, records, training, failures, analysis)


# Runners ----------------------------------------------------------------


def _binary(net: NetConfig) -> NetConfig:
    return NetConfig.model_validate({**net.model_dump(), "n_classes": 2, "head": None})


def run_sanity(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """CD and BD nets per replicate, measured on the held-out triples."""
    net_config = _binary(plan.net)
    check_geometry(plan, net_config)
    layers = resolve_layers(plan, net_config)
    bank = bank or StimulusBank.build(plan)
    _, val_triples = split_triples(bank.triples, plan.split_seed)
    sets = {task: make_cd_bd_sets(bank.triples, task, plan.split_seed, images=bank.images) for task in Task}

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        for task in (Task.CD, Task.BD):
            train_ds, val_ds = sets[task]
            model = fit_model(
                plan, task.value, r, net_config, plan.training, train_ds, val_ds,
                task.value.lower(), out_dir,
            )
            outcome.training.append(model.training_row())
            outcome.records.extend(measure(model.final, model.model_id, bank, val_triples, layers))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


def run_ablation(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """Natural baseline plus one ablated condition per replicate, on all triples."""
    if plan.name not in ABLATIONS:
        raise ConfigError(f"{plan.name.value} is not an ablation plan", ["name"])
    check_geometry(plan, plan.net)
    layers = resolve_layers(plan, plan.net)
    bank = bank or StimulusBank.build(plan)
    natural = natural if natural is not None else load_plan_dataset(plan)
    ablated = plan.name.value
    checkpoint_epochs = list(plan.training.checkpoint_epochs)
    if plan.name == PlanKind.UNTRAINED and 0 not in checkpoint_epochs:
        checkpoint_epochs.append(0)

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        seed = replicate_seed(plan, r)
        train_ds, val_ds = condition_data(NATURAL, plan, natural, seed)
        base = fit_model(
            plan, NATURAL, r, plan.net, plan.training, train_ds, val_ds, "natural", out_dir,
            checkpoint_epochs=checkpoint_epochs,
        )
        outcome.training.append(base.training_row())
        outcome.records.extend(measure(base.final, base.model_id, bank, bank.triples, layers))

        if plan.name == PlanKind.UNTRAINED:
            untrained = base.report.checkpoints[0]
            mid = model_id(ablated, r)
            outcome.training.append({
                "model_id": mid,
                "condition": ablated,
                "replicate": r,
                "seed": seed,
                "epochs_run": 0,
                "source": f"{base.model_id}@epoch0",
            })
            outcome.records.extend(measure(untrained, mid, bank, bank.triples, layers))
            return outcome

        abl_train, abl_val = condition_data(ablated, plan, natural, seed)
        kind = "white_noise" if plan.name == PlanKind.WHITE_NOISE else "natural"
        model = fit_model(plan, ablated, r, plan.net, plan.training, abl_train, abl_val, kind, out_dir)
        _same_architecture(base.final, model.final)
        row = model.training_row()
        if not model.report.validation_available:
            row["note"] = "train accuracy only"
        outcome.training.append(row)
        outcome.records.extend(measure(model.final, model.model_id, bank, bank.triples, layers))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


def _fc_config(plan: ExperimentPlan) -> NetConfig:
    if plan.fc_net is not None:
        if plan.fc_net.kind != NetKind.FULLY_CONNECTED:
            raise ConfigError("fc_net must be a fully connected network", ["fc_net.kind"])
        return plan.fc_net
    return NetConfig.model_validate({**plan.net.model_dump(), "kind": NetKind.FULLY_CONNECTED})


def fit_matched(
    plan: ExperimentPlan,
    replicate: int,
    net_config: NetConfig,
    training: TrainingConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    target: float,
    out_dir: Optional[Path] = None,
) -> Tuple[TrainedModel, bool, int]:
    """Train the FC net until its validation accuracy is within tolerance of `target`.

    Each attempt scales the learning rate by the next entry of `match_lr_scales` and stops
    as soon as an epoch lands within tolerance. Returns the closest model, whether it
    matched and the number of attempts used.
    """
    base_lr = training.learning_rate or net_config.default_learning_rate()
    tol = plan.match_tolerance

    def matched(_net, record) -> bool:
        return record.val_accuracy is not None and abs(record.val_accuracy - target) <= tol

    best: Optional[TrainedModel] = None
    best_gap = math.inf
    for attempt in range(plan.match_attempts):
        scale = plan.match_lr_scales[attempt % len(plan.match_lr_scales)]
        model = fit_model(
            plan, "FC", replicate, net_config, training, train_ds, val_ds, "natural", out_dir,
            lr=base_lr * scale, on_epoch_end=matched,
            artifact_name=f"{model_id('FC', replicate)}/attempt_{attempt + 1}",
        )
        gap = abs((model.report.final_val_accuracy or 0.0) - target)
        if gap < best_gap:
            best, best_gap = model, gap
        if gap <= tol:
            return model, True, attempt + 1
        logger.info("fc_match_retry", replicate=replicate, attempt=attempt + 1, gap=round(gap, 4))
    assert best is not None
    logger.warning("fc_match_failed", replicate=replicate, gap=round(best_gap, 4))
    return best, False, plan.match_attempts


def run_conv_vs_fc(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """Conv and accuracy-matched FC nets on the same natural set."""
    if plan.net.kind != NetKind.CONV:
        raise ConfigError("net must be convolutional for ConvVsFC", ["net.kind"])
    fc_config = _fc_config(plan)
    fc_training = plan.fc_training or plan.training
    check_geometry(plan, plan.net)
    bank = bank or StimulusBank.build(plan)
    natural = natural if natural is not None else load_plan_dataset(plan)

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        train_ds, val_ds = condition_data(NATURAL, plan, natural, replicate_seed(plan, r))
        if val_ds is None or len(val_ds) == 0:
            raise DatasetError("ConvVsFC needs a validation split to match accuracies")
        conv = fit_model(plan, "Conv", r, plan.net, plan.training, train_ds, val_ds, "natural", out_dir)
        target = conv.report.final_val_accuracy or 0.0
        fc, ok, attempts = fit_matched(plan, r, fc_config, fc_training, train_ds, val_ds, target, out_dir)
        fc.extra.update({"matched": ok, "match_attempts": attempts, "match_target": target})
        outcome.training.extend([conv.training_row(), fc.training_row()])
        outcome.records.extend(measure(conv.final, conv.model_id, bank, bank.triples, [PENULTIMATE]))
        outcome.records.extend(measure(fc.final, fc.model_id, bank, bank.triples, [PENULTIMATE]))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


def run_layerwise(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """Closure at every probed layer of a trained conv net (from `plan.checkpoint` if set)."""
    bank = bank or StimulusBank.build(plan)

    if plan.checkpoint is not None:
        checkpoint = load_checkpoint(plan.checkpoint)
        check_geometry(plan, checkpoint.config)
        layers = resolve_layers(plan, checkpoint.config)

        def from_checkpoint(r: int) -> ReplicateOutcome:
            mid = model_id(NATURAL, r)
            outcome = ReplicateOutcome(r)
            outcome.training.append({
                "model_id": mid,
                "condition": NATURAL,
                "replicate": r,
                "seed": checkpoint.seed,
                "epochs_run": checkpoint.epoch,
                "source": str(plan.checkpoint),
            })
            outcome.records.extend(measure(checkpoint, mid, bank, bank.triples, layers))
            return outcome

        return _finish(plan, run_replicates(from_checkpoint, 1, 1))

    check_geometry(plan, plan.net)
    layers = resolve_layers(plan, plan.net)
    natural = natural if natural is not None else load_plan_dataset(plan)

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        train_ds, val_ds = condition_data(NATURAL, plan, natural, replicate_seed(plan, r))
        model = fit_model(plan, NATURAL, r, plan.net, plan.training, train_ds, val_ds, "natural", out_dir)
        outcome.training.append(model.training_row())
        outcome.records.extend(measure(model.final, model.model_id, bank, bank.triples, layers))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


def run_trajectory(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """Closure at intermediate checkpoints of a natural and a degenerate training run."""
    degenerate = plan.trajectory_condition
    if degenerate not in (PlanKind.WHITE_NOISE, PlanKind.SHUFFLED_PIXELS, PlanKind.SHUFFLED_LABELS):
        raise ConfigError(
            f"trajectory_condition must be a trainable ablation, got {degenerate.value}",
            ["trajectory_condition"],
        )
    check_geometry(plan, plan.net)
    layers = resolve_layers(plan, plan.net)
    bank = bank or StimulusBank.build(plan)
    natural = natural if natural is not None else load_plan_dataset(plan)
    epochs = sorted({e for e in plan.trajectory_epochs if 0 <= e <= plan.training.epochs})

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        seed = replicate_seed(plan, r)
        for condition in (NATURAL, degenerate.value):
            train_ds, val_ds = condition_data(condition, plan, natural, seed)
            kind = "white_noise" if condition == PlanKind.WHITE_NOISE.value else "natural"
            model = fit_model(
                plan, condition, r, plan.net, plan.training, train_ds, val_ds, kind, out_dir,
                checkpoint_epochs=epochs,
            )
            outcome.training.append(model.training_row())
            for epoch in epochs:
                checkpoint = model.report.checkpoints.get(epoch)
                if checkpoint is None:
                    continue
                mid = model_id(f"{condition}@e{epoch}", r)
                outcome.records.extend(measure(checkpoint, mid, bank, bank.triples, layers))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


def brightness_condition(factor: float) -> str:
    return f"{NATURAL}@b{factor:g}"


def run_brightness(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: int = 1,
    bank: Optional[StimulusBank] = None,
    natural: Optional[Dataset] = None,
) -> ExperimentResult:
    """One natural-image model per brightness factor of the training set."""
    check_geometry(plan, plan.net)
    layers = resolve_layers(plan, plan.net)
    bank = bank or StimulusBank.build(plan)
    natural = natural if natural is not None else load_plan_dataset(plan)
    scaled = {f: scale_brightness(natural, f) for f in plan.brightness_factors}

    def job(r: int) -> ReplicateOutcome:
        outcome = ReplicateOutcome(r)
        for factor, ds in scaled.items():
            train_ds, val_ds = split_dataset(ds, plan.dataset.val_fraction, plan.split_seed)
            model = fit_model(
                plan, brightness_condition(factor), r, plan.net, plan.training, train_ds, val_ds,
                "natural", out_dir,
            )
            model.extra["brightness"] = factor
            outcome.training.append(model.training_row())
            outcome.records.extend(measure(model.final, model.model_id, bank, bank.triples, layers))
        return outcome

    return _finish(plan, run_replicates(job, plan.replications, jobs))


RUNNERS: Dict[PlanKind, Callable[..., ExperimentResult]] = {
    PlanKind.SANITY: run_sanity,
    PlanKind.WHITE_NOISE: run_ablation,
    PlanKind.SHUFFLED_PIXELS: run_ablation,
    PlanKind.UNTRAINED: run_ablation,
    PlanKind.SHUFFLED_LABELS: run_ablation,
    PlanKind.CONV_VS_FC: run_conv_vs_fc,
    PlanKind.LAYER_WISE: run_layerwise,
    PlanKind.TRAJECTORY: run_trajectory,
    PlanKind.BRIGHTNESS: run_brightness,
}


def sweep_label(plan: ExperimentPlan) -> str:
    return f"classes{plan.net.n_classes}_layers{plan.net.n_layers}"


def run_experiment(
    plan: ExperimentPlan,
    out_dir: Optional[Path] = None,
    jobs: Optional[int] = None,
    natural: Optional[Dataset] = None,
    bank: Optional[StimulusBank] = None,
) -> List[ExperimentResult]:
    """Run a plan (one sub-run per sweep combination) and write outputs under `out_dir`."""
    jobs = jobs or plan.jobs or settings.jobs
    plans = plan.expand_sweeps()
    bank = bank or StimulusBank.build(plan)
    results = []
    for sub in plans:
        sub_dir = None
        if out_dir is not None:
            sub_dir = Path(out_dir) if len(plans) == 1 else Path(out_dir) / sweep_label(sub)
        logger.info("experiment_started", plan=sub.name.value, label=sweep_label(sub), jobs=jobs)
        result = RUNNERS[sub.name](sub, out_dir=sub_dir, jobs=jobs, bank=bank, natural=natural)
        if sub_dir is not None:
            write_outputs(result, sub_dir)
        results.append(result)
    return results


# Analysis ---------------------------------------------------------------


def _group(records: Sequence[ClosureRecord], key: Callable[[ClosureRecord], object]) -> Dict:
    groups: Dict[object, List[ClosureRecord]] = {}
    for r in records:
        groups.setdefault(key(r), []).append(r)
    return groups


def _fsum_mean(values: Sequence[float]) -> float:
    return math.fsum(sorted(values)) / len(values)


def pooled_curves(plan: ExperimentPlan, records: Sequence[ClosureRecord]) -> List[ClosureCurve]:
    """One curve per (condition, layer), pooling the records of every replicate."""
    curves = []
    for (condition, _layer), group in _group(
        records, lambda r: (condition_of(r.model_id), r.layer_name)
    ).items():
        curve = closure_curve(
            group, "bootstrap", plan.bootstrap_samples, plan.base_seed, plan.confidence
        )
        curve.model_id = condition
        curves.append(curve)
    return curves


def replicate_curves(plan: ExperimentPlan, records: Sequence[ClosureRecord]) -> List[ClosureCurve]:
    return [
        closure_curve(group, "bootstrap", plan.bootstrap_samples, plan.base_seed, plan.confidence)
        for group in _group(records, lambda r: (r.model_id, r.layer_name)).values()
    ]


def triple_means(records: Sequence[ClosureRecord]) -> List[ClosureRecord]:
    """Per-triple closure averaged over replicates, one record per (condition, layer, triple)."""
    out = []
    groups = _group(records, lambda r: (condition_of(r.model_id), r.layer_name, r.triple_index))
    for (condition, layer, index), group in groups.items():
        out.append(
            ClosureRecord(
                triple_index=index,
                edge_length=group[0].edge_length,
                c=_fsum_mean([r.c for r in group]),
                s_ac=_fsum_mean([r.s_ac for r in group]),
                s_dc=_fsum_mean([r.s_dc for r in group]),
                layer_name=layer,
                model_id=condition,
            )
        )
    return out


def strictly_increasing(means: Sequence[float]) -> bool:
    return all(b > a for a, b in zip(means, means[1:]))


def is_flat(means: Sequence[float], threshold: float) -> bool:
    return max(abs(m) for m in means) < threshold


def curve_signature(means: Sequence[float], threshold: float) -> str:
    if is_flat(means, threshold):
        return NO_CLOSURE
    return CLOSURE if strictly_increasing(means) else AMBIGUOUS


def slope_test(plan: ExperimentPlan, records: Sequence[ClosureRecord]) -> Dict[str, object]:
    """Slope CI across replicates (t-interval of per-replicate slopes), bootstrap for one."""
    by_model = _group(records, lambda r: r.model_id)
    if len(by_model) > 1:
        slopes = [closure_slope(group, ci=None).slope for group in by_model.values()]
        interval = replication_interval(slopes, plan.confidence)
        return {
            "slope": interval.mean,
            "ci_lo": interval.ci_lo,
            "ci_hi": interval.ci_hi,
            "n": interval.n,
            "method": "replications",
            "per_replicate": slopes,
        }
    estimate = closure_slope(
        records, "bootstrap", plan.bootstrap_samples, plan.base_seed, plan.confidence
    )
    return estimate.to_dict()


def slope_signature(test: Dict[str, object]) -> str:
    lo, hi = test.get("ci_lo"), test.get("ci_hi")
    if lo is None or hi is None:
        return AMBIGUOUS
    if lo > 0:  # type: ignore[operator]
        return CLOSURE
    if hi < 0:  # type: ignore[operator]
        return AMBIGUOUS
    return NO_CLOSURE


def _primary_layer(records: Sequence[ClosureRecord]) -> str:
    layers = list(dict.fromkeys(r.layer_name for r in records))
    return PENULTIMATE if PENULTIMATE in layers else layers[-1]


def _select(records: Sequence[ClosureRecord], condition: str, layer: str) -> List[ClosureRecord]:
    return [r for r in records if condition_of(r.model_id) == condition and r.layer_name == layer]


def _curve(curves: Sequence[ClosureCurve], condition: str, layer: str) -> ClosureCurve:
    for c in curves:
        if c.model_id == condition and c.layer_name == layer:
            return c
    raise DegenerateSampleError(f"no records for condition {condition} at layer {layer}")


def _describe(plan: ExperimentPlan, records: Sequence[ClosureRecord], curve: ClosureCurve) -> Dict:
    return {
        "means": curve.means,
        "pooled_mean": _fsum_mean([r.c for r in triple_means(records)]),
        "max_abs": max(abs(m) for m in curve.means),
        "rise": curve.means[-1] - curve.means[0],
        "slope": slope_test(plan, records),
    }


def _analyze_sanity(plan, records, training, curves) -> Tuple[Dict, Dict]:
    layer = _primary_layer(records)
    stats: Dict[str, object] = {"layer": layer}
    verdict: Dict[str, object] = {}
    for task in (Task.CD.value, Task.BD.value):
        curve = _curve(curves, task, layer)
        stats[task] = _describe(plan, _select(records, task, layer), curve)
        verdict[task] = curve_signature(curve.means, plan.flatness_threshold)
    cd_means, bd_means = _curve(curves, "CD", layer).means, _curve(curves, "BD", layer).means
    invalid = [
        row["model_id"]
        for row in training
        if row.get("final_val_accuracy") is None or row["final_val_accuracy"] < 1.0
    ]
    verdict.update({
        "valid": not invalid,
        "invalid_replicates": invalid,
        "cd_increasing": strictly_increasing(cd_means),
        "bd_flat": is_flat(bd_means, plan.flatness_threshold),
        "cd_rise_ok": cd_means[-1] - cd_means[0] > plan.min_rise,
    })
    verdict["signature_reproduced"] = bool(
        verdict["valid"]
        and verdict["CD"] == CLOSURE
        and verdict["BD"] == NO_CLOSURE
        and verdict["cd_rise_ok"]
    )
    return stats, verdict


def _safe_anova(values) -> Dict[str, object]:
    try:
        return anova_two_way(values).to_dict()
    except DesignError as e:
        return {"error": str(e)}


def _p(table: Dict[str, object], effect: str) -> Optional[float]:
    effects = table.get("effects")
    if not isinstance(effects, dict):
        return None
    return effects[effect]["p"]


def _analyze_ablation(plan, records, training, curves) -> Tuple[Dict, Dict]:
    ablated = plan.name.value
    layer = _primary_layer(records)
    natural_records = _select(records, NATURAL, layer)
    ablated_records = _select(records, ablated, layer)
    nat_curve, abl_curve = _curve(curves, NATURAL, layer), _curve(curves, ablated, layer)

    values = [(NATURAL, r.edge_length, r.c) for r in triple_means(natural_records)]
    values += [(ablated, r.edge_length, r.c) for r in triple_means(ablated_records)]
    anova = _safe_anova(values)
    nat_stats = _describe(plan, natural_records, nat_curve)
    abl_stats = _describe(plan, ablated_records, abl_curve)
    nat_stats["slope"] = closure_slope(
        natural_records, "bootstrap", plan.bootstrap_samples, plan.base_seed, plan.confidence
    ).to_dict()
    stats: Dict[str, object] = {"layer": layer, "anova": anova, NATURAL: nat_stats, ablated: abl_stats}

    interaction_p = _p(anova, "interaction")
    model_p = _p(anova, "model")
    verdict: Dict[str, object] = {
        NATURAL: slope_signature(nat_stats["slope"]),
        "interaction_significant": interaction_p is not None and interaction_p < plan.alpha,
        "model_effect_significant": model_p is not None and model_p < plan.alpha,
        "effect_direction": (
            "natural>ablated" if nat_stats["pooled_mean"] > abl_stats["pooled_mean"] else "natural<=ablated"
        ),
    }
    natural_closure = verdict[NATURAL] == CLOSURE

    if plan.name in FLAT_ABLATIONS:
        verdict[ablated] = curve_signature(abl_curve.means, plan.flatness_threshold)
        verdict["pattern_reproduced"] = bool(
            natural_closure and verdict[ablated] == NO_CLOSURE and verdict["interaction_significant"]
        )
        return stats, verdict

    try:
        test = t_test_one_sample([r.c for r in triple_means(ablated_records)])
        abl_stats["t_test"] = test.to_dict()
        nonzero = test.mean > 0 and test.p_two_sided < plan.alpha
    except DegenerateSampleError as e:
        abl_stats["t_test"] = {"error": str(e)}
        nonzero = False
    weaker = abl_stats["pooled_mean"] < nat_stats["pooled_mean"]
    verdict[ablated] = "weak-closure" if nonzero and weaker else (CLOSURE if nonzero else NO_CLOSURE)
    verdict.update({
        "ablated_nonzero": nonzero,
        "ablated_weaker": weaker,
        "pattern_reproduced": bool(natural_closure and nonzero and weaker),
    })
    return stats, verdict


def _analyze_conv_vs_fc(plan, records, training, curves) -> Tuple[Dict, Dict]:
    stats: Dict[str, object] = {"layer": PENULTIMATE}
    verdict: Dict[str, object] = {}
    for condition in ("Conv", "FC"):
        selected = _select(records, condition, PENULTIMATE)
        stats[condition] = _describe(plan, selected, _curve(curves, condition, PENULTIMATE))
        verdict[condition] = slope_signature(stats[condition]["slope"])
    unmatched = [
        row["model_id"] for row in training if row.get("condition") == "FC" and not row.get("matched")
    ]
    stats["accuracy"] = {
        row["model_id"]: row.get("final_val_accuracy") for row in training
    }
    verdict.update({
        "matched": not unmatched,
        "unmatched_replicates": unmatched,
        "inconclusive": bool(unmatched),
    })
    verdict["pattern_reproduced"] = bool(
        not unmatched and verdict["Conv"] == CLOSURE and verdict["FC"] == NO_CLOSURE
    )
    return stats, verdict


def _analyze_by_layer(plan, records, condition, curves) -> Tuple[Dict, Dict]:
    layers = list(dict.fromkeys(r.layer_name for r in records))
    stats: Dict[str, object] = {"layers": layers}
    verdict: Dict[str, object] = {}
    for layer in layers:
        selected = _select(records, condition, layer)
        stats[layer] = _describe(plan, selected, _curve(curves, condition, layer))
        verdict[layer] = slope_signature(stats[layer]["slope"])
    verdict["closure_layers"] = [layer for layer in layers if verdict[layer] == CLOSURE]
    return stats, verdict


def _analyze_layerwise(plan, records, training, curves) -> Tuple[Dict, Dict]:
    stats, verdict = _analyze_by_layer(plan, records, NATURAL, curves)
    layers = stats["layers"]
    shallow, deep = layers[0], layers[-1]  # type: ignore[index]
    verdict["pattern_reproduced"] = bool(verdict[deep] == CLOSURE and verdict[shallow] != CLOSURE)
    return stats, verdict


def trajectory_rows(records: Sequence[ClosureRecord]) -> List[Dict[str, object]]:
    rows = []
    for (mid, layer), group in _group(records, lambda r: (r.model_id, r.layer_name)).items():
        condition, epoch = condition_of(mid).rsplit("@e", 1)
        rows.append({
            "condition": condition,
            "replicate": replicate_of(mid),
            "epoch": int(epoch),
            "layer": layer,
            "mean_C": _fsum_mean([r.c for r in group]),
        })
    return sorted(rows, key=lambda row: (row["condition"], row["replicate"], row["epoch"], row["layer"]))


def _analyze_trajectory(plan, records, training, curves) -> Tuple[Dict, Dict]:
    rows = trajectory_rows(records)
    by_epoch: Dict[Tuple[str, int], List[float]] = {}
    for row in rows:
        by_epoch.setdefault((row["condition"], row["epoch"]), []).append(row["mean_C"])
    stats = {
        "mean_by_epoch": [
            {"condition": c, "epoch": e, "mean_C": _fsum_mean(v), "replicates": len(v)}
            for (c, e), v in sorted(by_epoch.items())
        ]
    }
    return stats, {"note": "trajectory runs carry no verdict"}


def _analyze_brightness(plan, records, training, curves) -> Tuple[Dict, Dict]:
    layer = _primary_layer(records)
    conditions = list(dict.fromkeys(condition_of(r.model_id) for r in records))
    stats: Dict[str, object] = {"layer": layer, "conditions": conditions}
    verdict: Dict[str, object] = {}
    values = []
    for condition in conditions:
        selected = _select(records, condition, layer)
        stats[condition] = _describe(plan, selected, _curve(curves, condition, layer))
        verdict[condition] = slope_signature(stats[condition]["slope"])
        values += [(condition, r.edge_length, r.c) for r in triple_means(selected)]
    if len(conditions) > 1:
        stats["anova"] = _safe_anova(values)
    return stats, verdict


ANALYZERS = {
    PlanKind.SANITY: _analyze_sanity,
    PlanKind.WHITE_NOISE: _analyze_ablation,
    PlanKind.SHUFFLED_PIXELS: _analyze_ablation,
    PlanKind.UNTRAINED: _analyze_ablation,
    PlanKind.SHUFFLED_LABELS: _analyze_ablation,
    PlanKind.CONV_VS_FC: _analyze_conv_vs_fc,
    PlanKind.LAYER_WISE: _analyze_layerwise,
    PlanKind.TRAJECTORY: _analyze_trajectory,
    PlanKind.BRIGHTNESS: _analyze_brightness,
}


def analyze(
    plan: ExperimentPlan,
    records: Sequence[ClosureRecord],
    training: Sequence[Dict[str, object]],
    failures: Optional[Dict[int, List[str]]] = None,
) -> Analysis:
    """Curves, statistics and verdict of a plan, computed from its records only."""
    failures = failures or {}
    curves = pooled_curves(plan, records)
    stats, verdict = ANALYZERS[plan.name](plan, records, list(training), curves)
    verdict = {"plan": plan.name.value, **verdict, "failed_replicates": sorted(failures)}
    if failures and "valid" in verdict:
        verdict["valid"] = False
    for key in ("pattern_reproduced", "signature_reproduced"):
        if failures and key in verdict:
            verdict[key] = False
    return Analysis(
        curves=curves,
        replicate_curves=replicate_curves(plan, records),
        stats=stats,
        verdict=verdict,
        trajectory=trajectory_rows(records) if plan.name == PlanKind.TRAJECTORY else [],
    )


def derive_verdicts(
    plan: ExperimentPlan,
    records: Sequence[ClosureRecord],
    training: Sequence[Dict[str, object]] = (),
    failures: Optional[Dict[int, List[str]]] = None,
) -> Dict[str, object]:
    return analyze(plan, records, training, failures).verdict


# Output -----------------------------------------------------------------


def _dump_json(data: object, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def write_trajectory_csv(rows: Sequence[Dict[str, object]], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_HEADER)
        for row in rows:
            writer.writerow([
                row["condition"], row["replicate"], row["epoch"], row["layer"], f"{row['mean_C']:.17g}"
            ])
    return path


def write_outputs(result: ExperimentResult, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis = result.analysis
    written = [
        _dump_json(result.plan.model_dump(mode="json"), out_dir / "plan.json"),
        write_records_csv(result.records, out_dir / "records.csv"),
        write_curves_csv(analysis.curves, out_dir / "curves.csv"),
        write_curves_csv(analysis.replicate_curves, out_dir / "replicate_curves.csv"),
        _dump_json(analysis.stats, out_dir / "stats.json"),
        _dump_json(analysis.verdict, out_dir / "verdict.json"),
        _dump_json(
            {"models": result.training, "failures": {str(k): v for k, v in result.failures.items()}},
            out_dir / "training.json",
        ),
    ]
    if analysis.trajectory:
        written.append(write_trajectory_csv(analysis.trajectory, out_dir / "trajectory.csv"))
    logger.info("experiment_outputs_written", out_dir=str(out_dir), files=len(written))
    return written


def reanalyze(result_dir: Path) -> Analysis:
    """Recompute curves, statistics and verdict from the files of a finished run."""
    result_dir = Path(result_dir)
    with open(result_dir / "plan.json", "r", encoding="utf-8") as f:
        plan = ExperimentPlan.model_validate(json.load(f))
    with open(result_dir / "training.json", "r", encoding="utf-8") as f:
        training = json.load(f)
    records = read_records_csv(result_dir / "records.csv")
    failures = {int(k): v for k, v in training.get("failures", {}).items()}
    return analyze(plan, records, training.get("models", []), failures)
