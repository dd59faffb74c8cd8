"""Experiment configuration for attrdet."""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, TypeVar

import yaml

from .errors import AttrDetError, ConfigError
from .evaluation import EvalConfig
from .model.backbone import BackboneConfig
from .model.detector import DetectorConfig, ModelVariant
from .synthdata import SynthConfig
from .training import TrainConfig

DEFAULT_CONFIG = "attrdet.yml"
SEED_ENV = "RUN_SEED"

TOP_LEVEL_KEYS = {
    "seed",
    "variant",
    "output",
    "data",
    "synth",
    "model",
    "train",
    "eval",
    "visualize",
}

T = TypeVar("T")


def load_config(config_path: Path) -> Dict[str, Any]:
    """Load configuration from a YAML file.

    Args:
        config_path: Path to the experiment file

    Returns:
        Dictionary containing the configuration data

    Raises:
        FileNotFoundError: If the config file doesn't exist
        yaml.YAMLError: If the config file is invalid YAML
    """
    with open(config_path, "r") as f:
        return yaml.safe_load(f) or {}


@dataclass(frozen=True)
class DataConfig:
    """Dataset locations.

    Attributes:
        train_manifest: Manifest used for training
        test_manifest: Manifest used for evaluation
        split_file: Reference/target category split for transfer training
        split_seed: Seed of the random transfer split, the run seed if unset
    """

    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    split_file: Optional[Path] = None
    split_seed: Optional[int] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DataConfig":
        _check_keys("data", data, {f.name for f in dataclasses.fields(cls)})
        values = dict(data)
        for key in ("train_manifest", "test_manifest", "split_file"):
            if values.get(key) is not None:
                values[key] = Path(values[key])
        return cls(**values)


@dataclass(frozen=True)
class VisualizeConfig:
    confidence: float = 0.5
    scale: int = 2
    max_images: int = 16

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VisualizeConfig":
        _check_keys("visualize", data, {f.name for f in dataclasses.fields(cls)})
        return cls(**data)


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment.

    ``seed`` drives training and, unless the ``synth`` section sets its own, the
    generator; a seed from ``RUN_SEED`` or the command line drives both.
    ``test_images`` is the size of the synthetic test set.
    """

    seed: int = 0
    output: Path = Path("runs")
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    test_images: int = 100
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    visualize: VisualizeConfig = field(default_factory=VisualizeConfig)

    @property
    def variant(self) -> ModelVariant:
        return self.train.variant

    @property
    def split_seed(self) -> int:
        return self.seed if self.data.split_seed is None else self.data.split_seed

    def snapshot(self) -> Dict[str, Any]:
        """Plain mapping of every resolved value, stable across runs."""

        def plain(value: Any) -> Any:
            if isinstance(value, Path):
                return str(value)
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value

        synth = self.synth.to_dict()
        synth["test_images"] = self.test_images
        return plain(
            {
                "seed": self.seed,
                "variant": self.variant.value,
                "output": self.output,
                "data": dataclasses.asdict(self.data),
                "synth": synth,
                "model": {
                    "backbone": self.backbone.to_dict(),
                    "detector": self.detector.to_dict(),
                },
                "train": self.train.to_dict(),
                "eval": self.eval.to_dict(),
                "visualize": dataclasses.asdict(self.visualize),
            }
        )


def _check_keys(section: str, data: Any, allowed: set) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section or 'configuration'} must be a mapping")
    unknown = sorted(set(data) - allowed)
    if unknown:
        keys = ", ".join(f"{section}.{k}" if section else k for k in unknown)
        raise ConfigError(f"unknown configuration keys: {keys}")


def _section(name: str, build: Callable[[], T]) -> T:
    try:
        return build()
    except ConfigError:
        raise
    except (AttrDetError, TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _seed(
    raw: Mapping[str, Any], overrides: Mapping[str, Any], environ: Mapping[str, str]
) -> int:
    if overrides.get("seed") is not None:
        return int(overrides["seed"])
    if environ.get(SEED_ENV):
        try:
            return int(environ[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer") from e
    try:
        return int(raw.get("seed", 0))
    except (TypeError, ValueError) as e:
        raise ConfigError("seed must be an integer") from e


def resolve_config(
    raw: Mapping[str, Any],
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Turn a loaded YAML mapping into an :class:`ExperimentConfig`.

    Precedence is file, then the ``RUN_SEED`` environment variable for the seed,
    then ``overrides`` (command-line flags). ``None`` overrides are ignored.

    Args:
        raw: Mapping returned by :func:`load_config`
        overrides: Any of ``seed``, ``variant``, ``output``, ``split_file``,
            ``max_steps``, ``batch_size``, ``learning_rate``, ``confidence``
        environ: Environment, ``os.environ`` by default

    Returns:
        The resolved experiment

    Raises:
        ConfigError: For unknown keys or invalid values
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    environ = os.environ if environ is None else environ
    _check_keys("", raw, TOP_LEVEL_KEYS)
    seed = _seed(raw, overrides, environ)

    data = _section("data", lambda: DataConfig.from_dict(raw.get("data") or {}))
    if "split_file" in overrides:
        data = dataclasses.replace(data, split_file=Path(overrides["split_file"]))

    synth_raw = dict(raw.get("synth") or {})
    test_images = _section("synth", lambda: int(synth_raw.pop("test_images", 100)))
    if "seed" in overrides or environ.get(SEED_ENV):
        synth_raw["seed"] = seed
    else:
        synth_raw.setdefault("seed", seed)
    synth = _section("synth", lambda: SynthConfig.from_dict(synth_raw))

    model_raw = raw.get("model") or {}
    _check_keys("model", model_raw, {"backbone", "detector"})
    backbone = _section(
        "model.backbone",
        lambda: BackboneConfig.from_dict(model_raw.get("backbone") or {}),
    )
    detector = _section(
        "model.detector",
        lambda: DetectorConfig.from_dict(model_raw.get("detector") or {}),
    )

    train_raw = dict(raw.get("train") or {})
    if "variant" in raw:
        train_raw["variant"] = raw["variant"]
    for key in ("variant", "max_steps", "batch_size", "learning_rate"):
        if key in overrides:
            train_raw[key] = overrides[key]
    train_raw["seed"] = seed
    train = _section("train", lambda: TrainConfig.from_dict(train_raw))

    eval_config = _section("eval", lambda: EvalConfig.from_dict(raw.get("eval") or {}))
    visualize = _section(
        "visualize", lambda: VisualizeConfig.from_dict(raw.get("visualize") or {})
    )
    if "confidence" in overrides:
        visualize = dataclasses.replace(
            visualize, confidence=float(overrides["confidence"])
        )

    output = Path(overrides.get("output", raw.get("output", "runs")))
    return ExperimentConfig(
        seed=seed,
        output=output,
        data=data,
        synth=synth,
        test_images=test_images,
        backbone=backbone,
        detector=detector,
        train=train,
        eval=eval_config,
        visualize=visualize,
    )
