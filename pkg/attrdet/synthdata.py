"""Deterministic synthetic detection benchmark.

Scenes are colored, material-textured geometric shapes on a cluttered gray
background. Each shape kind is a category, each color centroid a color label and
each texture a material label, so the attribute-transfer protocol can be run at
desk scale.
"""

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .datamodel import (
    MIN_IMAGE_SIDE,
    Dataset,
    DetectionSample,
    ObjectAnnotation,
    Vocabulary,
    write_manifest,
)
from .errors import SynthError
from .geometry import Box, iou

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "bar")
TEXTURES = ("flat", "speckle", "stripe", "gloss-gradient")

MAX_PAIR_IOU = 0.3
MAX_COVERED_FRACTION = 0.2


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    min_size: int = 14
    max_size: int = 40


@dataclass(frozen=True)
class ColorSpec:
    name: str
    rgb: Tuple[int, int, int]
    jitter: float = 10.0


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    texture: str


DEFAULT_SHAPES: Tuple[ShapeSpec, ...] = tuple(ShapeSpec(kind) for kind in SHAPE_KINDS)
DEFAULT_SYNTH_COLORS: Tuple[ColorSpec, ...] = (
    ColorSpec("red", (215, 40, 40)),
    ColorSpec("green", (40, 175, 60)),
    ColorSpec("blue", (40, 70, 215)),
    ColorSpec("yellow", (230, 205, 40)),
    ColorSpec("white", (240, 240, 240)),
    ColorSpec("black", (20, 20, 20)),
)
DEFAULT_SYNTH_MATERIALS: Tuple[MaterialSpec, ...] = (
    MaterialSpec("wood", "stripe"),
    MaterialSpec("metal", "gloss-gradient"),
)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    Attributes:
        n_images: Number of images to render
        image_size: Side of the square images in pixels
        categories: Shape kinds with their size ranges, one per category
        colors: Color names with RGB centroid and jitter standard deviation
        materials: Material names with their texture kind
        objects_per_image: Inclusive range of objects per image
        seed: Seed; image ``i`` depends only on ``(seed, i)``
        attribute_label_rate: Probability an object keeps its attribute labels
        max_retries: Placement attempts per object before giving up
        clutter_per_image: Inclusive range of background clutter rectangles
        occluder_rate: Probability of a thin occluding stroke across an object
        workers: Threads used for rendering
    """

    n_images: int = 100
    image_size: int = 128
    categories: Tuple[ShapeSpec, ...] = DEFAULT_SHAPES
    colors: Tuple[ColorSpec, ...] = DEFAULT_SYNTH_COLORS
    materials: Tuple[MaterialSpec, ...] = DEFAULT_SYNTH_MATERIALS
    objects_per_image: Tuple[int, int] = (2, 4)
    seed: int = 0
    attribute_label_rate: float = 1.0 / 3.0
    max_retries: int = 100
    clutter_per_image: Tuple[int, int] = (2, 5)
    occluder_rate: float = 0.2
    workers: int = 1

    def __post_init__(self) -> None:
        if self.image_size < MIN_IMAGE_SIDE:
            raise SynthError(f"image_size must be at least {MIN_IMAGE_SIDE}")
        if len(self.categories) < 2:
            raise SynthError("at least 2 categories are required")
        if len(self.colors) < 2:
            raise SynthError("at least 2 colors are required")
        if len(self.materials) < 1:
            raise SynthError("at least 1 material is required")
        for shape in self.categories:
            if shape.kind not in SHAPE_KINDS:
                raise SynthError(f"unknown shape kind {shape.kind!r}")
            if not 4 <= shape.min_size <= shape.max_size < self.image_size:
                raise SynthError(f"invalid size range for {shape.kind!r}")
        for material in self.materials:
            if material.texture not in TEXTURES:
                raise SynthError(f"unknown texture {material.texture!r}")
        if not 0.0 <= self.attribute_label_rate <= 1.0:
            raise SynthError("attribute_label_rate must lie in [0, 1]")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise SynthError("objects_per_image must be an increasing range")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(
            categories=tuple(s.kind for s in self.categories),
            colors=tuple(c.name for c in self.colors),
            materials=tuple(m.name for m in self.materials),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthConfig":
        """Build a config from a YAML mapping; omitted keys keep their defaults."""
        kwargs: Dict[str, Any] = dict(data)
        if "categories" in kwargs:
            kwargs["categories"] = tuple(
                ShapeSpec(kind=c) if isinstance(c, str) else ShapeSpec(**c)
                for c in kwargs["categories"]
            )
        if "colors" in kwargs:
            kwargs["colors"] = tuple(
                ColorSpec(c["name"], tuple(c["rgb"]), c.get("jitter", 10.0))  # type: ignore[arg-type]
                for c in kwargs["colors"]
            )
        if "materials" in kwargs:
            kwargs["materials"] = tuple(MaterialSpec(**m) for m in kwargs["materials"])
        for key in ("objects_per_image", "clutter_per_image"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SynthError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**kwargs)


def _shape_mask(
    kind: str, size: int, x0: int, y0: int, rng: np.random.Generator, canvas: int
) -> np.ndarray:
    mask = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(mask)
    x1, y1 = x0 + size - 1, y0 + size - 1
    if kind == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == "square":
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == "triangle":
        draw.polygon([(x0 + size / 2, y0), (x1, y1), (x0, y1)], fill=255)
    elif kind == "cross":
        t = max(size // 3, 2)
        lo = size // 2 - t // 2
        draw.rectangle([x0, y0 + lo, x1, y0 + lo + t - 1], fill=255)
        draw.rectangle([x0 + lo, y0, x0 + lo + t - 1, y1], fill=255)
    elif kind == "ring":
        inset = max(size // 4, 2)
        draw.ellipse([x0, y0, x1, y1], fill=255)
        draw.ellipse([x0 + inset, y0 + inset, x1 - inset, y1 - inset], fill=0)
    elif kind == "bar":
        t = max(size // 3, 3)
        off = (size - t) // 2
        if rng.random() < 0.5:
            draw.rectangle([x0, y0 + off, x1, y0 + off + t - 1], fill=255)
        else:
            draw.rectangle([x0 + off, y0, x0 + off + t - 1, y1], fill=255)
    return np.asarray(mask) > 0


def _texture(
    texture: str, rgb: np.ndarray, h: int, w: int, jitter: float, rng: np.random.Generator
) -> np.ndarray:
    """Color field of shape ``(h, w, 3)`` for one object box."""
    field = np.broadcast_to(rgb, (h, w, 3)).astype(np.float32)
    field = field + rng.normal(0.0, jitter * 0.5, size=3).astype(np.float32)
    field = field + rng.normal(0.0, jitter, size=(h, w, 3)).astype(np.float32)
    if texture == "speckle":
        dots = rng.random((h, w)) < 0.2
        factor = np.where(rng.random((h, w)) < 0.5, 0.6, 1.4).astype(np.float32)
        field = np.where(dots[..., None], field * factor[..., None], field)
    elif texture == "stripe":
        yy, xx = np.mgrid[0:h, 0:w]
        dark = ((xx + yy) // 3) % 2 == 0
        field = np.where(dark[..., None], field * 0.65, field)
    elif texture == "gloss-gradient":
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (xx + yy) / max(h + w - 2, 1)
        field = field * (1.35 - 0.6 * ramp)[..., None].astype(np.float32)
    return field


def _overlaps(box: Box, placed: List[Box]) -> bool:
    for other in placed:
        if iou(box, other) >= MAX_PAIR_IOU:
            return True
        iw = min(box.x2, other.x2) - max(box.x1, other.x1)
        ih = min(box.y2, other.y2) - max(box.y1, other.y1)
        smaller = min(box.area, other.area)
        if iw > 0 and ih > 0 and iw * ih > MAX_COVERED_FRACTION * smaller:
            return True
    return False


def render_image(config: SynthConfig, index: int) -> DetectionSample:
    """Render image ``index``; depends only on ``config.seed`` and ``index``.

    Raises:
        SynthError: If an object cannot be placed within ``max_retries`` attempts
    """
    rng = np.random.default_rng([config.seed, index])
    s = config.image_size
    canvas = np.full((s, s, 3), rng.uniform(105, 150), dtype=np.float32)
    canvas += rng.normal(0.0, 6.0, size=(s, s, 3)).astype(np.float32)

    pil = Image.new("RGB", (s, s))
    draw = ImageDraw.Draw(pil)
    lo, hi = config.clutter_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        size = rng.integers(6, max(s // 4, 7), size=2)
        x0, y0 = rng.integers(0, s - size, size=2)
        shade = rng.uniform(80, 180) + rng.normal(0.0, 10.0, size=3)
        draw.rectangle(
            [int(x0), int(y0), int(x0 + size[0]), int(y0 + size[1])],
            fill=tuple(int(v) for v in np.clip(shade, 0, 255)),
        )
    clutter = np.asarray(pil).astype(np.float32)
    has_clutter = clutter.sum(axis=2) > 0
    canvas[has_clutter] = clutter[has_clutter]

    placed: List[Box] = []
    annotations: List[ObjectAnnotation] = []
    lo, hi = config.objects_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        category = int(rng.integers(len(config.categories)))
        shape = config.categories[category]
        for _attempt in range(config.max_retries):
            size = int(rng.integers(shape.min_size, shape.max_size + 1))
            x0, y0 = (int(v) for v in rng.integers(0, s - size + 1, size=2))
            mask = _shape_mask(shape.kind, size, x0, y0, rng, s)
            ys, xs = np.nonzero(mask)
            box = Box(
                float(xs.min()),
                float(ys.min()),
                float(xs.max() + 1),
                float(ys.max() + 1),
            )
            if not _overlaps(box, placed):
                break
        else:
            raise SynthError(
                f"image {index}: could not place object {len(placed)} after "
                f"{config.max_retries} attempts (scene too crowded)"
            )

        color = int(rng.integers(len(config.colors)))
        material = int(rng.integers(len(config.materials)))
        spec = config.colors[color]
        bx1, by1, bx2, by2 = (int(v) for v in box.as_list())
        field = _texture(
            config.materials[material].texture,
            np.asarray(spec.rgb, dtype=np.float32),
            by2 - by1,
            bx2 - bx1,
            spec.jitter,
            rng,
        )
        region = mask[by1:by2, bx1:bx2]
        canvas[by1:by2, bx1:bx2][region] = field[region]

        if rng.random() < config.occluder_rate:
            stroke = Image.new("L", (s, s), 0)
            sx = int(rng.integers(bx1, bx2))
            ImageDraw.Draw(stroke).line(
                [(sx, by1 - 2), (sx + int(rng.integers(-4, 5)), by2 + 2)],
                fill=255,
                width=2,
            )
            occluded = np.asarray(stroke) > 0
            canvas[occluded] = rng.uniform(90, 160)

        labelled = rng.random() < config.attribute_label_rate
        placed.append(box)
        annotations.append(
            ObjectAnnotation(
                box=box,
                category=category,
                color=color if labelled else None,
                material=material if labelled else None,
            )
        )

    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return DetectionSample(
        image_id=f"synth_{index:05d}",
        width=s,
        height=s,
        annotations=tuple(annotations),
        image=image,
    )


def generate(config: SynthConfig) -> Dataset:
    """Render ``config.n_images`` scenes.

    Images may be rendered by several threads; the output order is always the
    image index order.
    """
    indices = range(config.n_images)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            samples = list(pool.map(lambda i: render_image(config, i), indices))
    else:
        samples = [render_image(config, i) for i in indices]
    return Dataset(samples=tuple(samples), vocabulary=config.vocabulary())


def write_dataset(dataset: Dataset, out_dir: Path) -> Dataset:
    """Write images as PNG plus ``manifest.json`` under ``out_dir``.

    Returns:
        The dataset with ``image_path`` set on every sample
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sample in dataset.samples:
        path = image_dir / f"{sample.image_id}.png"
        Image.fromarray(sample.load_image()).save(path, format="PNG")
        written.append(dataclasses.replace(sample, image_path=path))
    result = dataclasses.replace(dataset, samples=tuple(written))
    write_manifest(result, out_dir / "manifest.json")
    return result
