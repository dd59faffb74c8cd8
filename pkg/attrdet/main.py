"""Main CLI entry point for attrdet."""

import dataclasses
import sys
from pathlib import Path
from typing import Any, NoReturn, Optional

import click
from rich.console import Console
from rich.panel import Panel

from .commands import cmd_eval, cmd_synth, cmd_train, cmd_transfer, cmd_visualize
from .config import DEFAULT_CONFIG, ExperimentConfig, load_config, resolve_config

console = Console()

ConfigPath = click.Path(exists=True, dir_okay=False, path_type=Path)
InputPath = click.Path(exists=True, path_type=Path)
OutputPath = click.Path(file_okay=False, path_type=Path)


def config_option(func: Any) -> Any:
    return click.option(
        "--config",
        "-c",
        type=ConfigPath,
        default=DEFAULT_CONFIG,
        show_default=True,
        help="Path to the experiment file",
    )(func)


def verbose_option(func: Any) -> Any:
    return click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")(
        func
    )


def force_option(func: Any) -> Any:
    return click.option(
        "--force",
        "-f",
        is_flag=True,
        help="Re-run steps even if their outputs are up to date",
    )(func)


def training_options(func: Any) -> Any:
    for option in reversed(
        [
            click.option("--variant", help="Model variant, e.g. two-stream-cross-link"),
            click.option("--seed", type=int, help="Run seed (overrides RUN_SEED)"),
            click.option("--out", type=OutputPath, help="Run directory"),
            click.option("--split", type=InputPath, help="Reference/target split file"),
            click.option("--steps", type=click.IntRange(min=0), help="Training steps"),
            click.option("--batch-size", type=click.IntRange(min=1), help="Batch size"),
            click.option("--lr", type=float, help="Learning rate"),
        ]
    ):
        func = option(func)
    return func


def _fail(message: str) -> NoReturn:
    console.print(f"[red]Error: {message}[/red]")
    sys.exit(1)


def _load_experiment(config_path: Path, **overrides: Any) -> ExperimentConfig:
    try:
        return resolve_config(load_config(config_path), overrides)
    except Exception as e:
        console.print(f"[red]Error loading config: {e}[/red]")
        sys.exit(1)


def _banner(title: str, detail: str) -> None:
    console.print(
        Panel.fit(f"[bold blue]{title}[/bold blue]\n{detail}", border_style="blue")
    )


def _success(message: str) -> None:
    console.print(
        Panel.fit(f"[bold green]✓ {message}[/bold green]", border_style="green")
    )


def _failure(message: str, error: Exception, verbose: bool = False) -> NoReturn:
    console.print(
        Panel.fit(
            f"[bold red]✗ {message}[/bold red]\n{error}",
            border_style="red",
        )
    )
    if verbose:
        console.print_exception()
    sys.exit(1)


@click.group()
@click.version_option()
def cli() -> None:
    """attrdet - Joint object detection with color and material recognition."""
    pass


@cli.command()
@config_option
@click.option("--seed", type=int, help="Generator seed (overrides RUN_SEED)")
@click.option(
    "--out", type=OutputPath, default="data", show_default=True, help="Output directory"
)
@verbose_option
def synth(config: Path, seed: Optional[int], out: Path, verbose: bool) -> None:
    """Generate the synthetic train and test sets."""
    experiment = _load_experiment(config, seed=seed)
    _banner("attrdet synth", f"Rendering {experiment.synth.n_images} images to {out}")
    try:
        fingerprints = cmd_synth(experiment, out, console)
    except KeyboardInterrupt:
        console.print("\n[yellow]Generation interrupted by user.[/yellow]")
        sys.exit(1)
    except Exception as e:
        _failure("Generation failed!", e, verbose)
    if verbose:
        for name, fingerprint in fingerprints.items():
            console.print(f"  {name}: {fingerprint}")
    _success("Synthetic data written")


@cli.command()
@config_option
@training_options
@click.option("--manifest", type=InputPath, help="Training manifest")
@force_option
@verbose_option
def train(
    config: Path,
    variant: Optional[str],
    seed: Optional[int],
    out: Optional[Path],
    split: Optional[Path],
    steps: Optional[int],
    batch_size: Optional[int],
    lr: Optional[float],
    manifest: Optional[Path],
    force: bool,
    verbose: bool,
) -> None:
    """Train a model variant."""
    experiment = _load_experiment(
        config,
        seed=seed,
        variant=variant,
        output=out,
        split_file=split,
        max_steps=steps,
        batch_size=batch_size,
        learning_rate=lr,
    )
    if manifest is not None:
        experiment = dataclasses.replace(
            experiment,
            data=dataclasses.replace(experiment.data, train_manifest=manifest),
        )
    if experiment.data.train_manifest is None:
        raise click.UsageError("no training manifest: pass --manifest or set data")

    _banner(
        "attrdet train",
        f"Training {experiment.variant.value} into {experiment.output}...",
    )
    try:
        cmd_train(experiment, console, verbose=verbose, force=force)
    except KeyboardInterrupt:
        console.print("\n[yellow]Training interrupted by user.[/yellow]")
        sys.exit(1)
    except Exception as e:
        _failure("Training failed!", e, verbose)
    _success("Training completed successfully!")


@cli.command(name="eval")
@config_option
@click.option("--checkpoint", type=InputPath, required=True, help="Checkpoint file")
@click.option("--manifest", type=InputPath, help="Manifest to evaluate on")
@click.option("--split", type=InputPath, help="Reference/target split file")
@click.option("--out", type=OutputPath, help="Report directory")
@verbose_option
def evaluate(
    config: Path,
    checkpoint: Path,
    manifest: Optional[Path],
    split: Optional[Path],
    out: Optional[Path],
    verbose: bool,
) -> None:
    """Evaluate a checkpoint: mAP@0.5 and attribute recall@0.5."""
    experiment = _load_experiment(config)
    manifest = manifest or experiment.data.test_manifest
    if manifest is None:
        raise click.UsageError("no test manifest: pass --manifest or set data")
    out = out or checkpoint.parent

    try:
        cmd_eval(checkpoint, manifest, out, experiment.eval, console, split_file=split)
    except Exception as e:
        _failure("Evaluation failed!", e, verbose)


@cli.command()
@config_option
@training_options
@force_option
@verbose_option
def transfer(
    config: Path,
    variant: Optional[str],
    seed: Optional[int],
    out: Optional[Path],
    split: Optional[Path],
    steps: Optional[int],
    batch_size: Optional[int],
    lr: Optional[float],
    force: bool,
    verbose: bool,
) -> None:
    """Run the two-run transfer protocol and average the results."""
    experiment = _load_experiment(
        config,
        seed=seed,
        variant=variant,
        output=out,
        split_file=split,
        max_steps=steps,
        batch_size=batch_size,
        learning_rate=lr,
    )
    _banner(
        "attrdet transfer",
        f"Transfer protocol for {experiment.variant.value} in {experiment.output}...",
    )
    try:
        cmd_transfer(experiment, console, verbose=verbose, force=force)
    except KeyboardInterrupt:
        console.print("\n[yellow]Transfer protocol interrupted by user.[/yellow]")
        sys.exit(1)
    except Exception as e:
        _failure("Transfer protocol failed!", e, verbose)
    _success("Transfer protocol completed successfully!")


@cli.command()
@config_option
@click.option("--checkpoint", type=InputPath, required=True, help="Checkpoint file")
@click.option("--manifest", type=InputPath, help="Manifest with the images to draw")
@click.option("--out", type=OutputPath, help="Image directory")
@click.option("--confidence", type=float, help="Minimum score of a drawn box")
@click.option("--split", type=InputPath, help="Color boxes by reference/target set")
def visualize(
    config: Path,
    checkpoint: Path,
    manifest: Optional[Path],
    out: Optional[Path],
    confidence: Optional[float],
    split: Optional[Path],
) -> None:
    """Draw detections with their category|color|material labels."""
    experiment = _load_experiment(config, confidence=confidence)
    manifest = manifest or experiment.data.test_manifest
    if manifest is None:
        raise click.UsageError("no manifest: pass --manifest or set data")
    settings = experiment.visualize

    try:
        cmd_visualize(
            checkpoint,
            manifest,
            out or checkpoint.parent / "visualize",
            console,
            confidence=settings.confidence,
            split_file=split,
            scale=settings.scale,
            max_images=settings.max_images,
        )
    except Exception as e:
        _fail(f"visualization failed: {e}")


if __name__ == "__main__":
    cli()
