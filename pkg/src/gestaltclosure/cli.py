#!/usr/bin/env python3
"""
Command-line interface for gestaltclosure.
"""

from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .config.log_setup import configure_logging
from .config.settings import ExperimentPlan, StimulusConfig, TrainRunConfig, settings
from .core.checkpoint import load_checkpoint
from .core.closure import (
    closure_per_triple,
    curves_by_model,
    embed_stimuli,
    write_curves_csv,
    write_records_csv,
)
from .core.datasets import datasets_from_config
from .core.errors import ConfigError, GestaltClosureError, UnknownLayerError
from .core.experiments import StimulusBank, run_experiment
from .core.manifest import (
    RunManifest,
    hash_file,
    load_run_config,
    prepare_output_dir,
    read_recorded,
)
from .core.network import build_network
from .core.report import emit_plots
from .core.stimuli import ExportFormat, build_triples, export_stimuli, read_triples_csv, write_triples_csv
from .core.trainer import train as train_network

PLANS_DIR = Path(__file__).parent / "config" / "plans"


class CliFormat(str, Enum):
    PNG = "png"
    RAW = "raw"

    @property
    def export_format(self) -> ExportFormat:
        return ExportFormat.PNG if self == CliFormat.PNG else ExportFormat.RAW

    @classmethod
    def from_export_format(cls, fmt: ExportFormat) -> "CliFormat":
        return cls.PNG if fmt == ExportFormat.PNG else cls.RAW


# Initialize CLI
app = typer.Typer(
    name="gestaltclosure",
    help="Gestalt closure stimuli, small convnets trained from scratch, and closure measurement",
    add_completion=False,
)
console = Console()


@app.callback()
def _setup(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Override GCL_LOG_LEVEL"),
    log_json: Optional[bool] = typer.Option(None, "--log-json/--log-console", help="Log renderer"),
):
    configure_logging(
        level=log_level or settings.log_level,
        json=settings.log_json if log_json is None else log_json,
    )


@contextmanager
def _guard(action: str) -> Iterator[None]:
    """Map library and I/O failures to a red message and exit code 1."""
    try:
        yield
    except KeyboardInterrupt:
        console.print(f"\n⚠️ {action} interrupted by user", style="yellow")
        raise typer.Exit(130)
    except ConfigError as e:
        console.print(f"❌ {action} failed: {e}", style="red")
        for path in e.field_paths:
            console.print(f"   field: {path}", style="red")
        raise typer.Exit(1)
    except (GestaltClosureError, OSError) as e:
        console.print(f"❌ {action} failed: {e}", style="red")
        if settings.debug:
            console.print_exception()
        raise typer.Exit(1)


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
    )


def _split_layers(values: List[str]) -> List[str]:
    layers = [name.strip() for v in values for name in v.split(",") if name.strip()]
    if not layers:
        raise ConfigError("no layer names given")
    return list(dict.fromkeys(layers))


def _stimulus_from(config: Optional[Path]) -> StimulusConfig:
    """Stimulus geometry from a config file or manifest, GCL_ settings filling the gaps."""
    if config is None:
        return settings.stimulus_config()
    return settings.with_stimulus(load_run_config(config, StimulusConfig, section="stimulus"))


def resolve_plan_path(plan: str) -> Path:
    """A plan file, a run manifest, or the name of a bundled plan (`sanity`, `layerwise`, ...)."""
    path = Path(plan)
    if path.exists():
        return path
    bundled = PLANS_DIR / (path.name if path.suffix else f"{path.name}.toml")
    if bundled.exists():
        return bundled
    available = ", ".join(sorted(p.stem for p in PLANS_DIR.glob("*.toml")))
    raise ConfigError(f"Plan not found: {plan} (bundled plans: {available})")


@app.command("gen-stimuli")
def gen_stimuli(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    fmt: Optional[CliFormat] = typer.Option(None, "--format", help="Image encoding [default: png]"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Triple assignment seed [default: 0]"),
    strict_position: Optional[bool] = typer.Option(
        None,
        "--strict-position/--any-position",
        help="Complete partners must also differ in position [default: any]",
    ),
    config: Optional[Path] = typer.Option(
        None, "--config", help="Stimulus configuration file or gen-stimuli manifest"
    ),
    force: bool = typer.Option(False, "--force", help="Overwrite a non-empty output directory"),
):
    """Render all stimuli and write the manifest and the triples CSV."""
    with _guard("Stimulus generation"):
        stimulus = _stimulus_from(config)
        # Flags left unset fall back to what a manifest recorded.
        recorded = read_recorded(config)
        previous = recorded.config if recorded else {}
        if fmt is None:
            fmt = CliFormat.from_export_format(ExportFormat(previous.get("format", ExportFormat.PNG)))
        if strict_position is None:
            strict_position = bool(previous.get("strict_position", False))
        if seed is None:
            seed = recorded.seeds.get("triples", 0) if recorded else 0
        manifest = RunManifest(
            command="gen-stimuli",
            config={**stimulus.model_dump(mode="json"), "format": fmt.export_format.value,
                    "strict_position": strict_position},
            seeds={"triples": seed},
        )
        triples = build_triples(seed, strict_position=strict_position)
        prepare_output_dir(out, force)
        with _progress() as progress:
            task = progress.add_task("Rendering stimuli...", total=None)
            export_stimuli(out, fmt.export_format, stimulus)
            write_triples_csv(triples, out / "triples.csv")
            progress.update(task, description="✅ Stimuli rendered")
        manifest.finish(out)
    console.print(f"✅ {len(triples)} triples written to {out}", style="green")


@app.command("train")
def train(
    config: Path = typer.Option(..., "--config", "-c", help="Training configuration or run manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the configured seed"),
    force: bool = typer.Option(False, "--force", help="Overwrite a non-empty output directory"),
):
    """Train one network and write its checkpoints and per-epoch report."""
    with _guard("Training"):
        run = load_run_config(config, TrainRunConfig)
        if seed is not None:
            run = run.model_copy(update={"seed": seed})
        run = run.model_copy(
            update={
                "net": settings.with_precision(run.net),
                "stimulus": settings.with_stimulus(run.stimulus),
            }
        )
        manifest = RunManifest(
            command="train",
            config=run.model_dump(mode="json"),
            seeds={"seed": run.seed, "triple_seed": run.triple_seed, "split_seed": run.split_seed},
            inputs={"config": hash_file(config)},
        )
        train_ds, val_ds = datasets_from_config(
            run.dataset, run.seed, run.stimulus, run.triple_seed, run.split_seed
        )
        prepare_output_dir(out, force)
        net = build_network(run.net, run.seed, debug=settings.debug)
        training = run.training
        with _progress() as progress:
            task = progress.add_task(f"Training for {training.epochs} epochs...", total=None)
            report = train_network(
                net,
                train_ds,
                training.augmentation_for(run.dataset.kind),
                training.epochs,
                lr=training.learning_rate,
                seed=run.seed,
                val=val_ds,
                batch_size=training.batch_size,
                rho=training.rho,
                epsilon=training.epsilon,
                checkpoint_epochs=training.checkpoint_epochs,
                out_dir=out,
                early_stop_val_accuracy=training.early_stop_val_accuracy,
            )
            progress.update(task, description="✅ Training completed")
        report.write_csv(out / "training.csv")
        manifest.finish(out)

    table = Table(title="Training Summary")
    table.add_column("Epochs", style="cyan")
    table.add_column("Train acc", style="green")
    table.add_column("Val acc", style="blue")
    table.add_column("Checkpoints", style="magenta")
    val = report.final_val_accuracy
    table.add_row(
        str(len(report.epochs)),
        f"{report.final_train_accuracy or 0.0:.3f}",
        "n/a" if val is None else f"{val:.3f}",
        str(len(report.checkpoint_paths)),
    )
    console.print(table)


@app.command("closure")
def closure(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint file (.npz)"),
    layers: List[str] = typer.Option(
        ..., "--layers", "-l", help="Layer names, comma separated or repeated"
    ),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    triples: Optional[Path] = typer.Option(None, "--triples", help="Triples CSV (default: built from --seed)"),
    seed: int = typer.Option(0, "--seed", help="Triple seed and bootstrap seed"),
    model_id: Optional[str] = typer.Option(None, "--model-id", help="Model id written to the CSVs"),
    config: Optional[Path] = typer.Option(None, "--config", help="Stimulus configuration file"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", min=1, help="Embedding threads"),
    force: bool = typer.Option(False, "--force", help="Overwrite a non-empty output directory"),
):
    """Measure closure records and curves of a trained checkpoint."""
    with _guard("Closure measurement"):
        stimulus = _stimulus_from(config)
        ckpt = load_checkpoint(checkpoint)
        net = ckpt.restore(debug=settings.debug)
        names = _split_layers(layers)
        for name in names:
            if name not in net.layer_names:
                raise UnknownLayerError(name, net.layer_names)
        triple_list = read_triples_csv(triples) if triples else build_triples(seed)
        inputs: Dict[str, str] = {"checkpoint": hash_file(checkpoint)}
        if triples:
            inputs["triples"] = hash_file(triples)
        manifest = RunManifest(
            command="closure",
            config={
                "layers": names,
                "checkpoint": str(checkpoint),
                "net": ckpt.config.model_dump(mode="json"),
                "stimulus": stimulus.model_dump(mode="json"),
            },
            seeds={"triples": seed, "bootstrap": seed},
            inputs=inputs,
        )
        prepare_output_dir(out, force)
        mid = model_id or checkpoint.stem
        with _progress() as progress:
            task = progress.add_task("Embedding stimuli...", total=None)
            embeddings = embed_stimuli(
                net,
                ckpt,
                names,
                StimulusBank.specs_for(triple_list),
                model_id=mid,
                stimulus_config=stimulus,
                jobs=jobs or settings.jobs,
            )
            records = [r for name in names for r in closure_per_triple(embeddings, triple_list, name)]
            progress.update(task, description="✅ Closure measured")
        write_records_csv(records, out / "records.csv")
        curves = list(curves_by_model(records, seed=seed).values())
        write_curves_csv(curves, out / "curves.csv")
        manifest.finish(out)

    table = Table(title=f"Mean closure ({mid})")
    table.add_column("Layer", style="cyan")
    for point in curves[0].points:
        table.add_column(f"e={point.edge_length}", style="green")
    for curve in curves:
        table.add_row(curve.layer_name, *(f"{m:+.4f}" for m in curve.means))
    console.print(table)


@app.command("experiment")
def experiment(
    plan: str = typer.Option(..., "--plan", "--config", "-p", help="Plan file, manifest, or bundled plan name"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the plan's base seed"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", min=1, help="Parallel replicates"),
    data_dir: Optional[Path] = typer.Option(None, "--data-dir", help="Natural-image directory"),
    force: bool = typer.Option(False, "--force", help="Overwrite a non-empty output directory"),
):
    """Run an experiment plan and write records, curves, statistics and verdicts."""
    with _guard("Experiment"):
        plan_path = resolve_plan_path(plan)
        spec = load_run_config(plan_path, ExperimentPlan)
        if seed is not None:
            spec = spec.model_copy(update={"base_seed": seed})
        if data_dir is not None:
            spec = spec.model_copy(update={"dataset": spec.dataset.model_copy(update={"root": data_dir})})
        spec = spec.model_copy(
            update={
                "net": settings.with_precision(spec.net),
                "fc_net": settings.with_precision(spec.fc_net) if spec.fc_net else None,
                "stimulus": settings.with_stimulus(spec.stimulus),
            }
        )
        manifest = RunManifest(
            command="experiment",
            config=spec.model_dump(mode="json"),
            seeds={
                "base_seed": spec.base_seed,
                "triple_seed": spec.triple_seed,
                "split_seed": spec.split_seed,
            },
            inputs={"plan": hash_file(plan_path)},
        )
        prepare_output_dir(out, force)
        console.print(
            f"🔬 Running {spec.name.value} with {spec.replications} replicate(s) into {out}"
        )
        with _progress() as progress:
            task = progress.add_task("Training and measuring...", total=None)
            results = run_experiment(spec, out_dir=out, jobs=jobs)
            progress.update(task, description="✅ Experiment completed")
        manifest.finish(out)

    for result in results:
        verdict = result.verdict
        lines = [f"**{key}**: {value}" for key, value in verdict.items() if key != "plan"]
        failed = bool(result.failures)
        console.print(
            Panel(
                "\n".join(lines),
                title=f"{verdict['plan']} ({result.plan.net.n_classes} classes, "
                f"{result.plan.net.n_layers} layers)",
                border_style="yellow" if failed else "green",
            )
        )
        if failed:
            console.print(f"⚠️ Failed replicates: {sorted(result.failures)}", style="yellow")


@app.command("report")
def report(
    inputs: List[Path] = typer.Argument(..., help="curves.csv files or experiment result directories"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory for SVG plots"),
    force: bool = typer.Option(False, "--force", help="Overwrite a non-empty output directory"),
):
    """Plot closure curves as SVG line charts."""
    with _guard("Report"):
        manifest = RunManifest(
            command="report",
            config={"inputs": [str(p) for p in inputs]},
            inputs={str(p): hash_file(p) for p in inputs if p.exists()},
        )
        prepare_output_dir(out, force)
        written = emit_plots(inputs, out)
        manifest.finish(out)
    for path in written:
        console.print(f"💾 Plot saved to: {path}")


def main():
    """Main entry point for CLI."""
    app()


if __name__ == "__main__":
    main()
