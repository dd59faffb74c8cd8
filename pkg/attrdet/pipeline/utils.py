"""Utilities for pipeline steps."""

import hashlib
import json
import platform
import random
from pathlib import Path
from typing import Dict, Iterable

import numpy as np
import torch

from .. import __version__
from ..datamodel import Dataset, manifest_dict


def get_system_info() -> Dict[str, str]:
    """Get system information.

    Returns:
        Dictionary with system information
    """
    return {
        "platform": platform.system(),
        "architecture": platform.machine(),
        "python_version": platform.python_version(),
        "torch_version": torch.__version__,
        "attrdet_version": __version__,
    }


def ensure_directory(path: Path) -> None:
    """Ensure a directory exists, creating it if necessary.

    Args:
        path: Directory path to ensure exists
    """
    path.mkdir(parents=True, exist_ok=True)


def fingerprint_files(paths: Iterable[Path]) -> str:
    """SHA-256 over the names and bytes of ``paths`` in the given order."""
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        digest.update(path.name.encode("utf-8"))
        digest.update(b"\0")
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        digest.update(b"\0")
    return digest.hexdigest()


def fingerprint_dataset(manifest_path: Path) -> str:
    """Fingerprint of a manifest and every image it references, in manifest order."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        records = json.load(f).get("samples", [])
    images = [
        manifest_path.parent / r["image_path"]
        for r in records
        if r.get("image_path") is not None
    ]
    return fingerprint_files([manifest_path, *images])


def fingerprint_samples(dataset: Dataset) -> str:
    """Fingerprint of an in-memory dataset: its canonical manifest and pixels."""
    digest = hashlib.sha256()
    digest.update(json.dumps(manifest_dict(dataset), sort_keys=True).encode("utf-8"))
    for sample in dataset.samples:
        digest.update(sample.load_image().tobytes())
    return digest.hexdigest()


def set_deterministic(seed: int) -> None:
    """Seed every global random source and prefer deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
