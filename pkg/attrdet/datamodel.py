"""Ground-truth and prediction types, vocabularies, manifests and category splits."""

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image

from .errors import GeometryError, ManifestError
from .geometry import Box

VG20_CATEGORIES: Tuple[str, ...] = (
    "car", "cat", "tree", "chair", "hat", "bottle", "shirt", "table", "bird", "truck",
    "door", "window", "dog", "bear", "bench", "fence", "cow", "cup", "post", "pole",
)  # fmt: skip
DEFAULT_COLORS: Tuple[str, ...] = (
    "white", "black", "green", "blue", "brown", "red",
    "gray", "yellow", "orange", "silver", "pink", "purple",
)  # fmt: skip
DEFAULT_MATERIALS: Tuple[str, ...] = ("wood", "metal", "plastic", "glass")

# Fixed two-group division of the VG-20 categories for the transfer protocol.
VG20_GROUPS: Tuple[Tuple[str, ...], Tuple[str, ...]] = (
    ("car", "tree", "hat", "door", "bird", "chair", "bottle", "table", "bear", "fence"),
    ("pole", "cup", "dog", "shirt", "truck", "cat", "window", "post", "bench", "cow"),
)

MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class Vocabulary:
    """Ordered category, color and material names."""

    categories: Tuple[str, ...]
    colors: Tuple[str, ...] = DEFAULT_COLORS
    materials: Tuple[str, ...] = DEFAULT_MATERIALS

    def __post_init__(self) -> None:
        if not self.categories:
            raise ManifestError("vocabulary needs at least one category", "vocabulary")
        for kind in ("categories", "colors", "materials"):
            names = getattr(self, kind)
            if len(set(names)) != len(names):
                raise ManifestError(f"duplicate names in {kind}", "vocabulary")

    @classmethod
    def default(cls) -> "Vocabulary":
        """The VG-20 vocabulary: 20 categories, 12 colors, 4 materials."""
        return cls(VG20_CATEGORIES, DEFAULT_COLORS, DEFAULT_MATERIALS)

    @property
    def attributes(self) -> Tuple[str, ...]:
        """Unified attribute space: colors followed by materials."""
        return self.colors + self.materials

    def category_index(self, name: str) -> int:
        return self.categories.index(name)

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "categories": list(self.categories),
            "colors": list(self.colors),
            "materials": list(self.materials),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Vocabulary":
        return cls(
            tuple(data.get("categories", ())),
            tuple(data.get("colors", ())),
            tuple(data.get("materials", ())),
        )


@dataclass(frozen=True)
class ObjectAnnotation:
    """One ground-truth object; color and material may be absent independently."""

    box: Box
    category: int
    color: Optional[int] = None
    material: Optional[int] = None

    @property
    def has_attributes(self) -> bool:
        return self.color is not None or self.material is not None


@dataclass(frozen=True)
class DetectionSample:
    """One image with its annotations.

    The raster is either kept in memory (``image``) or read lazily from
    ``image_path``.
    """

    image_id: str
    width: int
    height: int
    annotations: Tuple[ObjectAnnotation, ...] = ()
    image_path: Optional[Path] = None
    image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def load_image(self) -> np.ndarray:
        """Return the image as an ``H x W x 3`` uint8 array."""
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ManifestError("sample has neither an image nor a path", self.image_id)
        with Image.open(self.image_path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)


@dataclass(frozen=True)
class CategorySplit:
    """Reference categories keep attribute labels; target categories lose them."""

    reference: FrozenSet[int]
    target: FrozenSet[int]

    def __post_init__(self) -> None:
        if self.reference & self.target:
            raise ValueError("reference and target categories must be disjoint")

    def covers(self, num_categories: int) -> bool:
        return self.reference | self.target == frozenset(range(num_categories))

    def mirrored(self) -> "CategorySplit":
        return CategorySplit(reference=self.target, target=self.reference)

    def to_dict(self, vocabulary: Vocabulary) -> Dict[str, List[str]]:
        return {
            "reference": [vocabulary.categories[i] for i in sorted(self.reference)],
            "target": [vocabulary.categories[i] for i in sorted(self.target)],
        }


@dataclass(frozen=True)
class Detection:
    """One predicted object.

    ``category_scores`` is the softmax over ``|categories| + 1`` classes with the
    background probability first. ``label`` is the foreground category index the
    detection was emitted for and ``score`` its probability. Attribute distributions
    are ``None`` when the model has no attribute heads.
    """

    box: Box
    label: int
    score: float
    category_scores: np.ndarray = field(compare=False)
    color_scores: Optional[np.ndarray] = field(default=None, compare=False)
    material_scores: Optional[np.ndarray] = field(default=None, compare=False)
    objectness: float = 1.0

    @property
    def color(self) -> Optional[int]:
        if self.color_scores is None or self.color_scores.size == 0:
            return None
        return int(np.argmax(self.color_scores))

    @property
    def material(self) -> Optional[int]:
        if self.material_scores is None or self.material_scores.size == 0:
            return None
        return int(np.argmax(self.material_scores))


@dataclass(frozen=True)
class Dataset:
    """A loaded manifest: samples, vocabulary and an optional fixed category grouping."""

    samples: Tuple[DetectionSample, ...]
    vocabulary: Vocabulary
    groups: Optional[Tuple[Tuple[str, ...], Tuple[str, ...]]] = None

    def __len__(self) -> int:
        return len(self.samples)


def _resolve(
    value: Any, names: Sequence[str], kind: str, locator: str, optional: bool
) -> Optional[int]:
    if value is None:
        if optional:
            return None
        raise ManifestError(f"missing {kind}", locator)
    if value not in names:
        raise ManifestError(f"unknown {kind} {value!r}", locator)
    return list(names).index(value)


def _parse_sample(
    record: Mapping[str, Any], vocabulary: Vocabulary, base_dir: Path, locator: str
) -> DetectionSample:
    try:
        image_id = str(record["image_id"])
        width = int(record["width"])
        height = int(record["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"invalid sample header ({e})", locator) from e
    if width < MIN_IMAGE_SIDE or height < MIN_IMAGE_SIDE:
        raise ManifestError(f"image smaller than {MIN_IMAGE_SIDE}px", locator)
    image_path = record.get("image_path")
    annotations = []
    for j, ann in enumerate(record.get("annotations", [])):
        where = f"{locator}.annotations[{j}]"
        try:
            box = Box.from_sequence(ann["box"]).clip(width, height)
        except (KeyError, TypeError, GeometryError) as e:
            raise ManifestError(f"invalid box ({e})", where) from e
        annotations.append(
            ObjectAnnotation(
                box=box,
                category=_resolve(
                    ann.get("category"), vocabulary.categories, "category", where, False
                ),  # type: ignore[arg-type]
                color=_resolve(ann.get("color"), vocabulary.colors, "color", where, True),
                material=_resolve(
                    ann.get("material"), vocabulary.materials, "material", where, True
                ),
            )
        )
    return DetectionSample(
        image_id=image_id,
        width=width,
        height=height,
        annotations=tuple(annotations),
        image_path=(base_dir / image_path) if image_path else None,
    )


def _parse_groups(
    raw: Any, vocabulary: Vocabulary
) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    if not isinstance(raw, dict):
        raise ManifestError("groups must be an object with lists A and B", "groups")
    halves: List[Tuple[str, ...]] = []
    for key in ("A", "B"):
        names = raw.get(key)
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise ManifestError(f"{key} must be a list of category names", "groups")
        for name in names:
            if name not in vocabulary.categories:
                raise ManifestError(f"unknown category {name!r}", f"groups.{key}")
        halves.append(tuple(names))
    return halves[0], halves[1]


def load_manifest(path: Path) -> Dataset:
    """Load and validate a dataset manifest.

    Args:
        path: Path to the JSON manifest

    Returns:
        The validated dataset; image paths are resolved relative to the manifest

    Raises:
        FileNotFoundError: If the manifest does not exist
        ManifestError: On malformed JSON (with line number) or on any record that
            fails validation (with the record locator)
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(e.msg, f"line {e.lineno}, column {e.colno}") from e
    if not isinstance(data, dict) or "vocabulary" not in data:
        raise ManifestError("manifest must be an object with a vocabulary", "root")
    vocabulary = Vocabulary.from_dict(data["vocabulary"])
    samples = tuple(
        _parse_sample(record, vocabulary, path.parent, f"samples[{i}]")
        for i, record in enumerate(data.get("samples", []))
    )
    groups = None
    if data.get("groups") is not None:
        groups = _parse_groups(data["groups"], vocabulary)
    return Dataset(samples=samples, vocabulary=vocabulary, groups=groups)


def _relative(image_path: Path, base_dir: Path) -> str:
    try:
        return Path(os.path.relpath(image_path, base_dir)).as_posix()
    except ValueError:
        return Path(image_path).as_posix()


def manifest_dict(dataset: Dataset, base_dir: Optional[Path] = None) -> Dict[str, Any]:
    """Canonical mapping form of a dataset as written by :func:`write_manifest`."""
    vocab = dataset.vocabulary
    samples = []
    for sample in dataset.samples:
        record: Dict[str, Any] = {
            "image_id": sample.image_id,
            "width": sample.width,
            "height": sample.height,
            "image_path": (
                _relative(sample.image_path, base_dir)
                if sample.image_path is not None and base_dir is not None
                else (sample.image_path.as_posix() if sample.image_path else None)
            ),
            "annotations": [
                {
                    "box": ann.box.as_list(),
                    "category": vocab.categories[ann.category],
                    "color": None if ann.color is None else vocab.colors[ann.color],
                    "material": (
                        None if ann.material is None else vocab.materials[ann.material]
                    ),
                }
                for ann in sample.annotations
            ],
        }
        samples.append(record)
    data: Dict[str, Any] = {"vocabulary": vocab.to_dict(), "samples": samples}
    if dataset.groups is not None:
        data["groups"] = {"A": list(dataset.groups[0]), "B": list(dataset.groups[1])}
    return data


def write_manifest(dataset: Dataset, path: Path) -> None:
    """Write ``dataset`` as a deterministic UTF-8 JSON manifest.

    Keys are sorted and records keep their order, so equal inputs produce
    byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(
        manifest_dict(dataset, path.parent), indent=2, sort_keys=True, ensure_ascii=False
    )
    path.write_text(text + "\n", encoding="utf-8")


def make_split(vocabulary: Vocabulary, seed: int) -> Tuple[CategorySplit, CategorySplit]:
    """Partition the categories into two equal halves for the transfer protocol.

    Args:
        vocabulary: Vocabulary whose categories are split
        seed: Seed of the permutation

    Returns:
        ``(run_a, run_b)`` where ``run_b`` is ``run_a`` mirrored

    Raises:
        ValueError: If the category count is odd
    """
    n = len(vocabulary.categories)
    if n % 2:
        raise ValueError(f"transfer protocol needs an even category count, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    group_a = frozenset(int(i) for i in order[: n // 2])
    group_b = frozenset(int(i) for i in order[n // 2 :])
    run_a = CategorySplit(reference=group_a, target=group_b)
    return run_a, run_a.mirrored()


def split_from_groups(
    vocabulary: Vocabulary, groups: Tuple[Sequence[str], Sequence[str]]
) -> Tuple[CategorySplit, CategorySplit]:
    """Build mirrored splits from an explicit two-group division of category names."""
    group_a = frozenset(vocabulary.category_index(name) for name in groups[0])
    group_b = frozenset(vocabulary.category_index(name) for name in groups[1])
    run_a = CategorySplit(reference=group_a, target=group_b)
    if not run_a.covers(len(vocabulary.categories)):
        raise ValueError("category groups must cover every category")
    if len(group_a) != len(group_b):
        raise ValueError("category groups must have equal size")
    return run_a, run_a.mirrored()


def load_split(path: Path, vocabulary: Vocabulary) -> CategorySplit:
    """Read a split file: JSON or YAML mapping with ``reference`` and ``target`` names."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    try:
        return CategorySplit(
            reference=frozenset(vocabulary.category_index(n) for n in data["reference"]),
            target=frozenset(vocabulary.category_index(n) for n in data["target"]),
        )
    except (KeyError, ValueError) as e:
        raise ManifestError(f"invalid split file ({e})", str(path)) from e


def write_split(split: CategorySplit, vocabulary: Vocabulary, path: Path) -> None:
    Path(path).write_text(
        json.dumps(split.to_dict(vocabulary), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def mask_target_attributes(
    samples: Sequence[DetectionSample], split: CategorySplit
) -> List[DetectionSample]:
    """Drop color and material labels from every target-category annotation.

    Boxes, category labels and reference-category annotations are left untouched.
    """
    masked = []
    for sample in samples:
        annotations = tuple(
            replace(ann, color=None, material=None)
            if ann.category in split.target
            else ann
            for ann in sample.annotations
        )
        masked.append(replace(sample, annotations=annotations))
    return masked
