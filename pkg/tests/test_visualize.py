# pyright: basic
"""Tests for prediction images."""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from attrdet.datamodel import CategorySplit, Detection, Vocabulary
from attrdet.geometry import Box
from attrdet.model.detector import ModelVariant
from attrdet.visualize import (
    DEFAULT_COLOR,
    REFERENCE_COLOR,
    TARGET_COLOR,
    box_color,
    draw_detections,
    label_text,
    visualize_samples,
)

VOCAB = Vocabulary(("car", "cat"), ("red", "green"), ("wood", "metal"))


def detection(score=0.9, label=0, with_attributes=True) -> Detection:
    return Detection(
        box=Box(8, 8, 40, 40),
        label=label,
        score=score,
        category_scores=np.array([0.1, 0.9, 0.0]),
        color_scores=np.array([0.2, 0.8]) if with_attributes else None,
        material_scores=np.array([0.7, 0.3]) if with_attributes else None,
    )


class TestLabels:
    """Test detection captions and box colors."""

    def test_label_text(self):
        """Test the category|color|material caption."""
        assert label_text(detection(), VOCAB) == "car|green|wood"

    def test_label_text_without_attributes(self):
        """Test dashes for a detection-only model."""
        assert label_text(detection(with_attributes=False), VOCAB) == "car|-|-"

    def test_box_colors(self):
        """Test reference, target and default colors."""
        split = CategorySplit(reference=frozenset({0}), target=frozenset({1}))
        assert box_color(0, split) == REFERENCE_COLOR
        assert box_color(1, split) == TARGET_COLOR
        assert box_color(0, None) == DEFAULT_COLOR


class TestDrawDetections:
    """Test drawing onto an image."""

    image = np.zeros((64, 64, 3), dtype=np.uint8)

    def test_confidence_above_one_draws_nothing(self):
        """Test that an impossible threshold leaves the image untouched."""
        canvas = draw_detections(self.image, [detection(score=1.0)], VOCAB, confidence=1.1)
        assert np.array_equal(np.asarray(canvas), self.image)

    def test_box_drawn_in_split_color(self):
        """Test that a target-category box is drawn in red."""
        split = CategorySplit(reference=frozenset({0}), target=frozenset({1}))
        canvas = draw_detections(self.image, [detection(label=1)], VOCAB, split=split)
        pixels = np.asarray(canvas)
        assert tuple(pixels[30, 8]) == TARGET_COLOR

    def test_scale(self):
        """Test integer upscaling."""
        canvas = draw_detections(self.image, [], VOCAB, scale=2)
        assert canvas.size == (128, 128)


class TestVisualizeSamples:
    """Test writing prediction images for a dataset."""

    def test_one_png_per_sample(self, tiny_model, tiny_dataset):
        """Test file names and image sizes."""
        model = tiny_model(ModelVariant.SINGLE_STREAM, tiny_dataset.vocabulary).eval()
        samples = tiny_dataset.samples[:2]
        with tempfile.TemporaryDirectory() as temp_dir:
            paths = visualize_samples(model, samples, Path(temp_dir), scale=2)
            assert [p.name for p in paths] == [f"{s.image_id}.png" for s in samples]
            with Image.open(paths[0]) as img:
                assert img.size == (samples[0].width * 2, samples[0].height * 2)
