"""Annotated prediction images."""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .datamodel import CategorySplit, Detection, DetectionSample, Vocabulary
from .model.detector import Detector, predict

REFERENCE_COLOR = (30, 90, 255)
TARGET_COLOR = (230, 30, 30)
DEFAULT_COLOR = (255, 200, 0)
DEFAULT_CONFIDENCE = 0.5


def label_text(detection: Detection, vocabulary: Vocabulary) -> str:
    """``category|color|material``, with ``-`` for a missing attribute."""
    color = detection.color
    material = detection.material
    return "|".join(
        (
            vocabulary.categories[detection.label],
            "-" if color is None else vocabulary.colors[color],
            "-" if material is None else vocabulary.materials[material],
        )
    )


def box_color(label: int, split: Optional[CategorySplit]) -> Tuple[int, int, int]:
    if split is None:
        return DEFAULT_COLOR
    if label in split.target:
        return TARGET_COLOR
    if label in split.reference:
        return REFERENCE_COLOR
    return DEFAULT_COLOR


def draw_detections(
    image: np.ndarray,
    detections: Sequence[Detection],
    vocabulary: Vocabulary,
    confidence: float = DEFAULT_CONFIDENCE,
    split: Optional[CategorySplit] = None,
    scale: int = 1,
) -> Image.Image:
    """Draw detections scoring at least ``confidence``.

    With a split, reference-category boxes are blue and target-category boxes red.

    Args:
        image: ``H x W x 3`` uint8 image
        detections: Predictions for the image
        vocabulary: Names for labels
        confidence: Minimum score of a drawn detection
        split: Category split used for box colors
        scale: Integer upscaling applied before drawing

    Returns:
        The annotated image
    """
    canvas = Image.fromarray(image)
    if scale > 1:
        canvas = canvas.resize(
            (canvas.width * scale, canvas.height * scale), Image.Resampling.NEAREST
        )
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for det in detections:
        if det.score < confidence:
            continue
        outline = box_color(det.label, split)
        x1, y1, x2, y2 = (v * scale for v in det.box.as_list())
        draw.rectangle((x1, y1, x2, y2), outline=outline, width=max(1, scale))
        text = label_text(det, vocabulary)
        left, top, right, bottom = draw.textbbox((x1, y1), text, font=font)
        ty = max(0.0, y1 - (bottom - top) - 2)
        background = (x1, ty, x1 + (right - left) + 2, ty + (bottom - top) + 2)
        draw.rectangle(background, fill=outline)
        draw.text((x1 + 1, ty), text, fill=(255, 255, 255), font=font)
    return canvas


def visualize_samples(
    model: Detector,
    samples: Sequence[DetectionSample],
    out_dir: Path,
    confidence: float = DEFAULT_CONFIDENCE,
    split: Optional[CategorySplit] = None,
    scale: int = 1,
    batch_size: int = 4,
) -> List[Path]:
    """Predict on ``samples`` and write ``{image_id}.png`` files to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threshold = min(confidence, model.config.score_threshold)
    written = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = [s.load_image() for s in chunk]
        for sample, image, dets in zip(
            chunk, images, predict(model, images, threshold)
        ):
            path = out_dir / f"{sample.image_id}.png"
            draw_detections(image, dets, model.vocabulary, confidence, split, scale).save(
                path, format="PNG"
            )
            written.append(path)
    return written
