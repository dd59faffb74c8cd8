# pyright: basic
"""Shared fixtures: a tiny vocabulary, backbone, dataset and experiment."""

import io
import tempfile
from pathlib import Path

import pytest
import torch
from rich.console import Console

from attrdet.config import DataConfig, ExperimentConfig, VisualizeConfig
from attrdet.datamodel import Vocabulary
from attrdet.model.backbone import BackboneConfig
from attrdet.model.detector import DetectorConfig, build_model
from attrdet.model.rpn import RPNConfig
from attrdet.synthdata import ShapeSpec, SynthConfig, generate, write_dataset
from attrdet.training import TrainConfig

TINY_BACKBONE = BackboneConfig(
    widths=(8, 8, 16, 16), blocks=(1, 1, 1, 1), fpn_channels=8, stem_channels=8
)
TINY_DETECTOR = DetectorConfig(
    rpn=RPNConfig(
        pre_nms_top_n_train=200,
        pre_nms_top_n_test=100,
        post_nms_top_n_train=40,
        post_nms_top_n_test=20,
    ),
    representation_size=32,
    embedding_dim=8,
)


def tiny_synth_config(**overrides) -> SynthConfig:
    values = dict(
        n_images=4,
        image_size=64,
        seed=0,
        categories=(ShapeSpec("circle", 12, 24), ShapeSpec("square", 12, 24)),
        objects_per_image=(1, 3),
        attribute_label_rate=1.0,
    )
    values.update(overrides)
    return SynthConfig(**values)


@pytest.fixture
def vocabulary() -> Vocabulary:
    return Vocabulary(
        ("circle", "square", "ring"), ("red", "green", "blue", "white"), ("wood", "metal")
    )


@pytest.fixture
def tiny_model():
    """Factory building a small detector of any variant with a fixed seed."""

    def build(variant, vocabulary, seed: int = 0):
        torch.manual_seed(seed)
        return build_model(variant, vocabulary, TINY_BACKBONE, TINY_DETECTOR)

    return build


@pytest.fixture
def tiny_dataset():
    return generate(tiny_synth_config())


def quiet_console() -> Console:
    """Real console writing to a buffer, usable behind a rich progress bar."""
    return Console(file=io.StringIO(), width=120)


def tiny_experiment(root: Path, **train_overrides) -> ExperimentConfig:
    """Experiment over the ``workspace`` data that trains for one step."""
    train = dict(max_steps=1, batch_size=2)
    train.update(train_overrides)
    return ExperimentConfig(
        output=root / "run",
        data=DataConfig(
            train_manifest=root / "train" / "manifest.json",
            test_manifest=root / "test" / "manifest.json",
        ),
        synth=tiny_synth_config(),
        test_images=2,
        backbone=TINY_BACKBONE,
        detector=TINY_DETECTOR,
        train=TrainConfig(**train),
        visualize=VisualizeConfig(max_images=1),
    )


@pytest.fixture
def workspace():
    """Temporary directory holding a tiny train and test set."""
    with tempfile.TemporaryDirectory() as temp_dir:
        root = Path(temp_dir)
        write_dataset(generate(tiny_synth_config()), root / "train")
        write_dataset(generate(tiny_synth_config(seed=1, n_images=2)), root / "test")
        yield root
