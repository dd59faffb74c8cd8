"""Checkpoint files: weights plus everything needed to rebuild the model."""

from pathlib import Path
from typing import Any, Dict, Tuple

import torch

from .. import __version__
from ..datamodel import Vocabulary
from ..errors import ModelError
from .backbone import BackboneConfig
from .detector import Detector, DetectorConfig, ModelVariant

CHECKPOINT_SUFFIX = ".ckpt"


def checkpoint_path(run_dir: Path, step: int) -> Path:
    """``{run_dir}/step_{step}.ckpt``."""
    return Path(run_dir) / f"step_{step}{CHECKPOINT_SUFFIX}"


def save_checkpoint(model: Detector, path: Path, step: int = 0) -> Path:
    """Write the model weights together with its variant, vocabulary and configs.

    Args:
        model: Detector to save
        path: Destination file; parent directories are created
        step: Optimizer step the weights belong to

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, Any] = {
        "format_version": 1,
        "tool_version": __version__,
        "step": step,
        "variant": model.variant.value,
        "vocabulary": model.vocabulary.to_dict(),
        "backbone": model.backbone_config.to_dict(),
        "detector": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: Path, map_location: str = "cpu"
) -> Tuple[Detector, Dict[str, Any]]:
    """Rebuild a detector from a checkpoint without the original config file.

    Returns:
        The model in evaluation mode and the checkpoint metadata (everything except
        the weights)

    Raises:
        FileNotFoundError: If the file does not exist
        ModelError: If the file is not a valid checkpoint
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise ModelError(f"cannot read checkpoint {path} ({e})") from e

    missing = {"variant", "vocabulary", "backbone", "detector", "state_dict"} - set(
        payload
    )
    if missing:
        raise ModelError(f"checkpoint {path} lacks {', '.join(sorted(missing))}")

    model = Detector(
        ModelVariant.parse(payload["variant"]),
        Vocabulary.from_dict(payload["vocabulary"]),
        BackboneConfig.from_dict(payload["backbone"]),
        DetectorConfig.from_dict(payload["detector"]),
    )
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ModelError(f"checkpoint {path} does not match its variant ({e})") from e
    model.eval()
    metadata = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, metadata
