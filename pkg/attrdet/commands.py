"""Command implementations for the attrdet CLI."""

import dataclasses
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from rich.console import Console

from .config import ExperimentConfig
from .datamodel import (
    CategorySplit,
    Dataset,
    load_manifest,
    load_split,
    write_split,
)
from .errors import ConfigError, PipelineError
from .evaluation import (
    EvalConfig,
    EvalReport,
    TransferResult,
    evaluate,
    render_table,
    run_transfer_protocol,
    write_report,
)
from .model.checkpoint import load_checkpoint
from .model.detector import Detector
from .pipeline import PipelineStep, RunContext
from .pipeline.runner import PipelineRunner
from .pipeline.steps import (
    EvaluateStep,
    PrepareRunStep,
    TrainStep,
    VisualizeStep,
    final_model,
)
from .pipeline.utils import fingerprint_dataset, set_deterministic
from .synthdata import generate, write_dataset
from .visualize import visualize_samples

MANIFEST_NAME = "manifest.json"
SPLIT_NAME = "split.json"


def cmd_synth(
    config: ExperimentConfig, out_dir: Path, console: Console
) -> Dict[str, str]:
    """Render the synthetic train and test sets.

    The training set goes to ``out_dir/train`` and uses ``config.synth`` as is;
    the test set goes to ``out_dir/test`` with ``test_images`` images and the
    generator seed plus one, so the two sets never share a scene.

    Args:
        config: Resolved experiment
        out_dir: Destination directory
        console: Rich console for output

    Returns:
        Dataset fingerprint per written split
    """
    out_dir = Path(out_dir)
    splits = [("train", config.synth)]
    if config.test_images > 0:
        splits.append(
            (
                "test",
                dataclasses.replace(
                    config.synth,
                    n_images=config.test_images,
                    seed=config.synth.seed + 1,
                ),
            )
        )

    fingerprints = {}
    for name, synth in splits:
        console.print(
            f"[blue]→ {name}[/blue] - {synth.n_images} images, seed {synth.seed}"
        )
        write_dataset(generate(synth), out_dir / name)
        fingerprints[name] = fingerprint_dataset(out_dir / name / MANIFEST_NAME)
        console.print(
            f"[green]✓ {name}[/green] {out_dir / name / MANIFEST_NAME} "
            f"[dim]({fingerprints[name][:16]})[/dim]"
        )
    return fingerprints


def _run_pipeline(
    steps: Sequence[PipelineStep], console: Console, verbose: bool, force: bool
) -> None:
    runner = PipelineRunner(steps, console=console, verbose=verbose, force=force)
    if not runner.run():
        raise PipelineError(f"failed steps: {', '.join(runner.failed_steps)}")


def cmd_train(
    config: ExperimentConfig,
    console: Console,
    verbose: bool = False,
    force: bool = False,
) -> RunContext:
    """Train the configured variant into ``config.output``.

    Evaluation on the test manifest follows when one is configured, then
    prediction images of its first ``visualize.max_images`` images.

    Raises:
        PipelineError: If any step fails
    """
    set_deterministic(config.seed)
    context = RunContext(config=config, run_dir=Path(config.output))
    steps: List[PipelineStep] = [
        PrepareRunStep(context, console, verbose),
        TrainStep(context, console, verbose),
    ]
    if config.data.test_manifest is not None:
        steps.append(EvaluateStep(context, console, verbose))
        if config.visualize.max_images > 0:
            steps.append(VisualizeStep(context, console, verbose))
    _run_pipeline(steps, console, verbose, force)
    return context


def cmd_eval(
    checkpoint: Path,
    manifest: Path,
    out_dir: Path,
    config: EvalConfig,
    console: Console,
    split_file: Optional[Path] = None,
) -> EvalReport:
    """Evaluate a checkpoint and write ``report.json`` and ``report.txt``.

    With ``split_file`` the report carries reference and target subgroups and is
    rendered in the transfer layout.
    """
    model, metadata = load_checkpoint(checkpoint)
    dataset = load_manifest(manifest)
    split = None if split_file is None else load_split(split_file, dataset.vocabulary)
    report = evaluate(model, dataset, config, split)
    label = str(metadata["variant"])
    transfer = split is not None
    json_path, _ = write_report(report, out_dir, label, transfer)
    console.print(render_table([(label, report)], transfer=transfer))
    console.print(f"[green]✓ Report written to {json_path}[/green]")
    return report


def _groups(
    config: ExperimentConfig, dataset: Dataset
) -> Optional[Tuple[Tuple[str, ...], Tuple[str, ...]]]:
    if config.data.split_file is None:
        return None
    split = load_split(config.data.split_file, dataset.vocabulary)
    names = dataset.vocabulary.categories
    return (
        tuple(names[i] for i in sorted(split.reference)),
        tuple(names[i] for i in sorted(split.target)),
    )


def cmd_transfer(
    config: ExperimentConfig,
    console: Console,
    verbose: bool = False,
    force: bool = False,
) -> TransferResult:
    """Run the two-run transfer protocol under ``config.output``.

    Each run trains in ``run_1`` or ``run_2`` with the attribute labels of its
    target half removed; ``average.json`` holds the mean of the two reports.

    Raises:
        ConfigError: If a manifest is missing from the configuration
        PipelineError: If training a run fails
    """
    if config.data.train_manifest is None or config.data.test_manifest is None:
        raise ConfigError(
            "data.train_manifest and data.test_manifest are required for transfer"
        )
    set_deterministic(config.seed)
    output = Path(config.output)
    train_dataset = load_manifest(config.data.train_manifest)
    test_dataset = load_manifest(config.data.test_manifest)
    vocabulary = train_dataset.vocabulary
    label = config.variant.value

    def train_run(index: int, split: CategorySplit, masked: Dataset) -> Detector:
        context = RunContext(
            config=config,
            run_dir=output / f"run_{index}",
            label=label,
            train_dataset=masked,
            split=split,
        )
        _run_pipeline(
            [
                PrepareRunStep(context, console, verbose),
                TrainStep(context, console, verbose),
            ],
            console,
            verbose,
            force,
        )
        write_split(split, vocabulary, context.run_dir / SPLIT_NAME)
        return final_model(context)

    result = run_transfer_protocol(
        train_run,
        train_dataset,
        test_dataset,
        config.split_seed,
        config.eval,
        groups=_groups(config, train_dataset),
        console=console,
    )

    rows = []
    for index, run in enumerate(result.runs, start=1):
        write_report(run.report, output / f"run_{index}", label, transfer=True)
        rows.append((f"{label} (run {index})", run.report))
    write_report(result.average, output, label, transfer=True, stem="average")
    rows.append((f"{label} (mean)", result.average))
    console.print(render_table(rows, transfer=True, title="Transfer results"))
    return result


def cmd_visualize(
    checkpoint: Path,
    manifest: Path,
    out_dir: Path,
    console: Console,
    confidence: float = 0.5,
    split_file: Optional[Path] = None,
    scale: int = 1,
    max_images: Optional[int] = None,
) -> List[Path]:
    """Draw the detections of a checkpoint on manifest images.

    Boxes below ``confidence`` are not drawn; with ``split_file`` reference
    boxes are blue and target boxes red.
    """
    model, _ = load_checkpoint(checkpoint)
    dataset = load_manifest(manifest)
    split = None if split_file is None else load_split(split_file, dataset.vocabulary)
    samples = list(dataset.samples)
    if max_images is not None:
        samples = samples[:max_images]
    written = visualize_samples(model, samples, out_dir, confidence, split, scale)
    console.print(f"[green]✓ Wrote {len(written)} images to {out_dir}[/green]")
    return written
