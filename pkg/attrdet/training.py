"""Optimisation loop, checkpointing and gradient-block audits."""

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeRemainingColumn,
)
from rich.table import Table

from .datamodel import CategorySplit, Dataset, DetectionSample, mask_target_attributes
from .errors import ConfigError, ModelError, TrainingError
from .evaluation import EvalConfig, EvalReport, evaluate
from .losses import LossBreakdown, attribute_loss, detection_loss, rpn_loss
from .model.backbone import BackboneConfig
from .model.checkpoint import checkpoint_path, save_checkpoint
from .model.detector import Detector, DetectorConfig, ModelVariant, build_model
from .targets import (
    AnchorMatchConfig,
    GroundTruth,
    RoIMatchConfig,
    RoITargets,
    append_ground_truth,
    assign_anchor_targets,
    assign_roi_targets,
)

METRICS_FILE = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    The defaults are the desk-scale preset; :meth:`published` gives the published
    learning rate and batch size.

    Attributes:
        variant: Model wiring to train
        learning_rate: Adam step size
        batch_size: Images per step
        max_steps: Optimizer steps; 0 writes the initial checkpoint only
        seed: Seeds initialisation, data order, flips and target sampling
        eval_interval: Steps between evaluations on the held-out set, 0 disables
        checkpoint_interval: Steps between intermediate checkpoints, 0 disables
        log_interval: Steps between verbose loss lines
        betas: Adam moment decay rates
        eps: Adam epsilon
        weight_decay: Adam L2 penalty
        grad_clip: Max global gradient norm, ``None`` disables clipping
        horizontal_flip: Flip each image with probability 0.5
        workers: Threads decoding images, 0 loads in the main thread
        device: Torch device name
        anchor_matching: RPN target thresholds and sampling
        roi_matching: RoI target threshold and sampling
    """

    variant: ModelVariant = ModelVariant.TWO_STREAM_CROSS_LINK
    learning_rate: float = 1e-3
    batch_size: int = 4
    max_steps: int = 3000
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 50
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 10.0
    horizontal_flip: bool = True
    workers: int = 0
    device: str = "cpu"
    anchor_matching: AnchorMatchConfig = field(default_factory=AnchorMatchConfig)
    roi_matching: RoIMatchConfig = field(default_factory=RoIMatchConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps must not be negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive")

    @classmethod
    def published(cls, **overrides: Any) -> "TrainConfig":
        """Adam at 5e-5 with 12 images per batch and no clipping."""
        values: Dict[str, Any] = {
            "learning_rate": 5e-5,
            "batch_size": 12,
            "grad_clip": None,
        }
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["variant"] = self.variant.value
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        values = dict(data)
        unknown = set(values) - {f.name for f in dataclasses.fields(cls)} - {"preset"}
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        preset = values.pop("preset", "desk")
        if preset not in ("desk", "published"):
            raise ConfigError(
                f"unknown train preset {preset!r}; use desk or published"
            )
        if "variant" in values:
            values["variant"] = ModelVariant.parse(values["variant"])
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        if "anchor_matching" in values:
            values["anchor_matching"] = AnchorMatchConfig(**values["anchor_matching"])
        if "roi_matching" in values:
            values["roi_matching"] = RoIMatchConfig(**values["roi_matching"])
        return cls.published(**values) if preset == "published" else cls(**values)


@dataclass
class GradientAudit:
    """Largest object-stream gradient magnitude after backpropagating ``L_attr``."""

    variant: ModelVariant
    max_abs_gradient: float
    parameters_checked: int
    worst_parameter: Optional[str]

    @property
    def passed(self) -> bool:
        return self.max_abs_gradient == 0.0


@dataclass
class TrainResult:
    """Outcome of :func:`train`.

    Attributes:
        model: Trained model in training mode
        run_dir: Directory holding checkpoints and the metrics log
        checkpoint: Final checkpoint path
        steps: Steps performed
        history: Metrics records in write order
        attribute_rows_per_category: RoI rows with a color or material target
            that reached the attribute loss, per category index
        eval_reports: Periodic evaluations by step
    """

    model: Detector
    run_dir: Path
    checkpoint: Path
    steps: int
    history: List[Dict[str, Any]]
    attribute_rows_per_category: Dict[int, int]
    eval_reports: List[Tuple[int, EvalReport]] = field(default_factory=list)


def compute_pixel_stats(
    samples: Sequence[DetectionSample],
) -> Tuple[List[float], List[float]]:
    """Per-channel mean and standard deviation in ``[0, 1]`` units."""
    total = np.zeros(3, dtype=np.float64)
    squares = np.zeros(3, dtype=np.float64)
    count = 0
    for sample in samples:
        pixels = sample.load_image().reshape(-1, 3).astype(np.float64) / 255.0
        total += pixels.sum(axis=0)
        squares += (pixels**2).sum(axis=0)
        count += pixels.shape[0]
    if count == 0:
        return [0.5, 0.5, 0.5], [0.25, 0.25, 0.25]
    mean = total / count
    std = np.sqrt(np.maximum(squares / count - mean**2, 1e-12))
    return mean.tolist(), std.tolist()


def compute_losses(
    model: Detector,
    images: Sequence[np.ndarray],
    ground_truth: Sequence[GroundTruth],
    config: TrainConfig,
    generator: Optional[torch.Generator] = None,
) -> Tuple[LossBreakdown, RoITargets]:
    """Full forward pass and every loss term for one batch.

    Ground-truth boxes are appended to the proposals before RoI sampling. The PA
    embedding receives the ground-truth label of each sampled RoI.

    Returns:
        The loss breakdown and the concatenated RoI targets of the batch
    """
    batch, sizes = model.preprocess(images)
    object_maps, attribute_maps = model.backbone_features(batch)
    proposals, rpn_output = model.forward_rpn(batch, sizes, object_maps)

    anchor_targets = [
        assign_anchor_targets(
            rpn_output.anchors,
            gt.boxes.to(batch.device),
            config.anchor_matching,
            generator,
        )
        for gt in ground_truth
    ]
    rpn_objectness, rpn_box = rpn_loss(rpn_output, anchor_targets)

    per_image = [
        assign_roi_targets(
            append_ground_truth(p.boxes, gt.boxes),
            gt,
            config.roi_matching,
            generator,
        )
        for p, gt in zip(proposals, ground_truth)
    ]
    targets = RoITargets.cat(per_image)
    outputs = model.classify(
        object_maps, attribute_maps, [t.boxes for t in per_image], targets.labels
    )
    cls, loc = detection_loss(outputs, targets)
    color, material, attr = attribute_loss(
        outputs,
        targets,
        unified=model.variant.attribute_loss == "uce",
        num_colors=len(model.vocabulary.colors),
    )
    losses = LossBreakdown(rpn_objectness, rpn_box, cls, loc, color, material, attr)
    return losses, targets


def load_batch(
    samples: Sequence[DetectionSample],
    flips: Sequence[bool],
    pool: Optional[ThreadPoolExecutor] = None,
) -> Tuple[List[np.ndarray], List[GroundTruth]]:
    """Decode images (in order, optionally on a thread pool) and apply flips."""
    if pool is not None:
        raw = list(pool.map(DetectionSample.load_image, samples))
    else:
        raw = [s.load_image() for s in samples]
    images = [
        np.ascontiguousarray(img[:, ::-1]) if flip else img
        for img, flip in zip(raw, flips)
    ]
    ground_truth = [GroundTruth.from_sample(s, f) for s, f in zip(samples, flips)]
    return images, ground_truth


def _index_stream(size: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(size).tolist()


def _write_record(path: Path, record: Mapping[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def parameter_table(model: Detector) -> Table:
    table = Table(title=f"Parameters ({model.variant.value})")
    table.add_column("Component")
    table.add_column("Parameters", justify="right")
    for name, count in model.parameter_report().items():
        table.add_row(name, f"{count:,}")
    return table


def train(
    config: TrainConfig,
    dataset: Dataset,
    run_dir: Path,
    split: Optional[CategorySplit] = None,
    backbone_config: Optional[BackboneConfig] = None,
    detector_config: Optional[DetectorConfig] = None,
    eval_dataset: Optional[Dataset] = None,
    eval_config: Optional[EvalConfig] = None,
    console: Optional[Console] = None,
    verbose: bool = False,
) -> TrainResult:
    """Train a detector and write checkpoints plus a metrics log.

    The run is a pure function of ``config.seed`` and the inputs: the seed fixes
    initialisation, data order, flips and target sampling. ``step_0.ckpt`` holds
    the initial weights and ``step_{max_steps}.ckpt`` the final ones.

    Args:
        config: Optimisation settings
        dataset: Training set
        run_dir: Output directory, created if needed
        split: Transfer split; target-category attribute labels are removed
        backbone_config: Backbone layout
        detector_config: Head and inference settings
        eval_dataset: Held-out set for periodic evaluation
        eval_config: Metric settings for periodic evaluation
        console: Receives progress and verbose output
        verbose: Print the parameter report and periodic loss lines

    Returns:
        The trained model with its history

    Raises:
        TrainingError: If a loss becomes non-finite or the dataset is empty
    """
    if len(dataset) == 0:
        raise TrainingError("training set is empty")
    console = console or Console(quiet=True)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    metrics_path.write_text("", encoding="utf-8")

    samples = list(dataset.samples)
    if split is not None:
        samples = mask_target_attributes(samples, split)

    torch.manual_seed(config.seed)
    model = build_model(
        config.variant, dataset.vocabulary, backbone_config, detector_config
    )
    model.set_pixel_stats(*compute_pixel_stats(samples))
    model.to(torch.device(config.device))
    model.train()
    if verbose:
        console.print(parameter_table(model))

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    order = _index_stream(len(samples), rng)
    num_categories = len(dataset.vocabulary.categories)
    attribute_rows = torch.zeros(num_categories, dtype=torch.long)
    history: List[Dict[str, Any]] = []
    reports: List[Tuple[int, EvalReport]] = []
    save_checkpoint(model, checkpoint_path(run_dir, 0), step=0)

    pool = ThreadPoolExecutor(config.workers) if config.workers > 0 else None
    progress = Progress(
        TextColumn("[blue]{task.description}[/blue]"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("loss {task.fields[loss]}"),
        TimeRemainingColumn(),
        console=console,
        transient=True,
    )
    try:
        with progress:
            task = progress.add_task(
                f"Training {config.variant.value}", total=config.max_steps, loss="-"
            )
            for step in range(1, config.max_steps + 1):
                batch = [samples[next(order)] for _ in range(config.batch_size)]
                flips = [
                    bool(config.horizontal_flip and rng.random() < 0.5) for _ in batch
                ]
                images, ground_truth = load_batch(batch, flips, pool)

                losses, targets = compute_losses(
                    model, images, ground_truth, config, generator
                )
                losses.check_finite(step)
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()

                with_attribute = (targets.color_mask | targets.material_mask).cpu()
                attribute_rows += torch.bincount(
                    targets.labels.cpu()[with_attribute] - 1, minlength=num_categories
                )
                record: Dict[str, Any] = {
                    "step": step,
                    "lr": optimizer.param_groups[0]["lr"],
                    "timestamp": time.time(),
                    **losses.as_dict(),
                }
                history.append(record)
                _write_record(metrics_path, record)
                progress.update(task, advance=1, loss=f"{record['total']:.3f}")
                if verbose and step % config.log_interval == 0:
                    parts = ", ".join(
                        f"{k} {v:.4f}" for k, v in losses.as_dict().items()
                    )
                    console.print(f"[dim]step {step}:[/dim] {parts}")

                if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                    save_checkpoint(model, checkpoint_path(run_dir, step), step=step)
                if eval_dataset is not None and config.eval_interval and (
                    step % config.eval_interval == 0
                ):
                    report = evaluate(model, eval_dataset, eval_config or EvalConfig())
                    model.train()
                    reports.append((step, report))
                    eval_record = {"step": step, "eval": report.summary()}
                    history.append(eval_record)
                    _write_record(metrics_path, eval_record)
    finally:
        if pool is not None:
            pool.shutdown()

    final = save_checkpoint(
        model, checkpoint_path(run_dir, config.max_steps), step=config.max_steps
    )
    console.print(
        f"[green]✓[/green] Trained {config.variant.value} for {config.max_steps} "
        f"steps → {final}"
    )
    return TrainResult(
        model=model,
        run_dir=run_dir,
        checkpoint=final,
        steps=config.max_steps,
        history=history,
        attribute_rows_per_category={
            i: int(n) for i, n in enumerate(attribute_rows.tolist())
        },
        eval_reports=reports,
    )


def audit_gradient_block(
    model: Detector,
    images: Sequence[np.ndarray],
    ground_truth: Sequence[GroundTruth],
    config: Optional[TrainConfig] = None,
) -> GradientAudit:
    """Backpropagate the attribute loss alone and measure object-stream gradients.

    A cross-linked or plain two-stream model passes with an exact zero; the
    late-fusion model does not.

    Raises:
        ModelError: If the model is not a two-stream variant
        TrainingError: If the batch yields no attribute-labelled RoI
    """
    if not model.variant.is_two_stream:
        raise ModelError(
            f"gradient audit needs a two-stream variant, got {model.variant.value}"
        )
    config = config or TrainConfig(variant=model.variant)
    generator = torch.Generator().manual_seed(config.seed)
    model.zero_grad(set_to_none=True)
    losses, targets = compute_losses(model, images, ground_truth, config, generator)
    if losses.attr is None or not bool(
        (targets.color_mask | targets.material_mask).any()
    ):
        raise TrainingError("audit batch has no attribute-labelled objects")
    losses.attr.backward()

    worst_name: Optional[str] = None
    worst = 0.0
    checked = 0
    for name, param in model.stream_parameters("object"):
        checked += 1
        if param.grad is None:
            continue
        value = float(param.grad.abs().max())
        if value > worst:
            worst, worst_name = value, name
    model.zero_grad(set_to_none=True)
    return GradientAudit(model.variant, worst, checked, worst_name)
