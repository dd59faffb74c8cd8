"""Individual pipeline step implementations."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .. import __version__
from ..datamodel import Dataset, load_manifest, load_split
from ..errors import ConfigError, PipelineError, TrainingError
from ..evaluation import evaluate, render_table, write_report
from ..model.checkpoint import checkpoint_path, load_checkpoint
from ..model.detector import Detector
from ..training import train
from ..visualize import visualize_samples
from . import PipelineStep, RunContext
from .utils import (
    ensure_directory,
    fingerprint_dataset,
    fingerprint_samples,
    get_system_info,
)

RUN_MANIFEST = "run_manifest.json"
TRAIN_RECORD = "train_complete.json"


@dataclass
class RunManifest:
    """What a run was produced from.

    Everything except ``system`` must match for two runs to be interchangeable.
    """

    config: Dict[str, Any]
    seed: int
    variant: str
    dataset_fingerprint: str
    tool_version: str = __version__
    system: Dict[str, str] = field(default_factory=dict, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        return cls(
            config=dict(data["config"]),
            seed=int(data["seed"]),
            variant=str(data["variant"]),
            dataset_fingerprint=str(data["dataset_fingerprint"]),
            tool_version=str(data.get("tool_version", "")),
            system=dict(data.get("system", {})),
        )

    def write(self, path: Path) -> None:
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def final_checkpoint(context: RunContext) -> Path:
    return checkpoint_path(context.run_dir, context.config.train.max_steps)


def _require_train_dataset(context: RunContext) -> Dataset:
    if context.train_dataset is None:
        path = context.config.data.train_manifest
        if path is None:
            raise ConfigError("data.train_manifest is required for training")
        context.train_dataset = load_manifest(path)
    return context.train_dataset


def _test_dataset(context: RunContext) -> Optional[Dataset]:
    if context.test_dataset is None and context.config.data.test_manifest is not None:
        context.test_dataset = load_manifest(context.config.data.test_manifest)
    return context.test_dataset


def final_model(context: RunContext) -> Detector:
    if context.model is None:
        context.model, _ = load_checkpoint(final_checkpoint(context))
    return context.model


class PrepareRunStep(PipelineStep):
    """Create the run directory and write the run manifest."""

    @property
    def name(self) -> str:
        return "Prepare run"

    @property
    def description(self) -> str:
        return f"Write {RUN_MANIFEST} to {self.context.run_dir}"

    def execute(self) -> bool:
        context = self.context
        config = context.config
        ensure_directory(context.run_dir)
        dataset = _require_train_dataset(context)
        if context.split is None and config.data.split_file is not None:
            context.split = load_split(config.data.split_file, dataset.vocabulary)

        manifest_path = config.data.train_manifest
        if manifest_path is not None and Path(manifest_path).exists():
            fingerprint = fingerprint_dataset(manifest_path)
        else:
            fingerprint = fingerprint_samples(dataset)
        snapshot = config.snapshot()
        if context.split is not None:
            snapshot["split"] = context.split.to_dict(dataset.vocabulary)
        manifest = RunManifest(
            config=snapshot,
            seed=config.seed,
            variant=config.variant.value,
            dataset_fingerprint=fingerprint,
            system=get_system_info(),
        )
        manifest.write(context.run_dir / RUN_MANIFEST)
        context.manifest = manifest.to_dict()
        if self.verbose:
            self.console.print(f"  Dataset fingerprint: {fingerprint[:16]}")
        return True


class TrainStep(PipelineStep):
    """Train the configured variant.

    Completed when the final checkpoint exists and was trained from a manifest
    equal to the current one.
    """

    @property
    def name(self) -> str:
        return "Train"

    @property
    def description(self) -> str:
        train = self.context.config.train
        return f"Train {train.variant.value} for {train.max_steps} steps"

    def is_completed(self) -> bool:
        record_path = self.context.run_dir / TRAIN_RECORD
        if not final_checkpoint(self.context).exists() or not record_path.exists():
            return False
        if not self.context.manifest:
            return False
        try:
            with open(record_path, "r", encoding="utf-8") as f:
                recorded = RunManifest.from_dict(json.load(f)["manifest"])
        except (KeyError, TypeError, ValueError):
            return False
        return recorded == RunManifest.from_dict(self.context.manifest)

    def execute(self) -> bool:
        context = self.context
        config = context.config
        dataset = _require_train_dataset(context)
        eval_dataset = _test_dataset(context) if config.train.eval_interval else None
        result = train(
            config.train,
            dataset,
            context.run_dir,
            split=context.split,
            backbone_config=config.backbone,
            detector_config=config.detector,
            eval_dataset=eval_dataset,
            eval_config=config.eval,
            console=self.console,
            verbose=self.verbose,
        )
        context.model = result.model

        vocabulary = dataset.vocabulary
        rows = {
            vocabulary.categories[i]: n
            for i, n in result.attribute_rows_per_category.items()
        }
        if context.split is not None:
            leaked = [
                vocabulary.categories[i]
                for i in sorted(context.split.target)
                if result.attribute_rows_per_category.get(i, 0)
            ]
            if leaked:
                raise TrainingError(
                    f"attribute targets reached the loss for target categories: "
                    f"{', '.join(leaked)}"
                )
        record = {
            "manifest": context.manifest,
            "checkpoint": result.checkpoint.name,
            "steps": result.steps,
            "attribute_rows_per_category": rows,
        }
        (context.run_dir / TRAIN_RECORD).write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return True


class EvaluateStep(PipelineStep):
    """Score the final checkpoint on the test manifest."""

    @property
    def name(self) -> str:
        return "Evaluate"

    @property
    def description(self) -> str:
        return "Compute mAP@0.5 and attribute recall@0.5"

    def execute(self) -> bool:
        context = self.context
        test = _test_dataset(context)
        if test is None:
            raise PipelineError("data.test_manifest is required for evaluation")
        model = final_model(context)
        report = evaluate(model, test, context.config.eval, context.split)
        context.report = report
        transfer = context.split is not None
        json_path, _ = write_report(report, context.run_dir, context.label, transfer)
        self.console.print(render_table([(context.label, report)], transfer=transfer))
        if self.verbose:
            self.console.print(f"  Report written to {json_path}")
        return True


class VisualizeStep(PipelineStep):
    """Draw predictions on the first test images."""

    @property
    def name(self) -> str:
        return "Visualize"

    @property
    def description(self) -> str:
        confidence = self.context.config.visualize.confidence
        return f"Draw detections with confidence ≥ {confidence}"

    def execute(self) -> bool:
        context = self.context
        settings = context.config.visualize
        test = _test_dataset(context)
        if test is None:
            raise PipelineError("data.test_manifest is required for visualization")
        written = visualize_samples(
            final_model(context),
            test.samples[: settings.max_images],
            context.run_dir / "visualize",
            settings.confidence,
            context.split,
            settings.scale,
        )
        self.console.print(f"  Wrote {len(written)} images")
        return True
