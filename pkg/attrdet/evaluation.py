"""Detection mAP, attribute recall, subgroup reports and the transfer protocol."""

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from rich.console import Console
from rich.table import Table

from .datamodel import (
    CategorySplit,
    Dataset,
    Detection,
    DetectionSample,
    ObjectAnnotation,
    Vocabulary,
    make_split,
    mask_target_attributes,
    split_from_groups,
)
from .errors import ConfigError, EvaluationError
from .geometry import iou
from .model.detector import Detector, predict

ATTRIBUTES = ("color", "material")
SUBGROUPS = ("reference", "target")


@dataclass(frozen=True)
class EvalConfig:
    """Metric settings.

    Attributes:
        iou_threshold: Minimum IoU of a correct detection
        score_threshold: Minimum detection score counted for attribute recall
        category_aware: Attribute recall also requires the correct category
        min_object_size: Objects with a shorter side below this are left out of
            attribute-recall denominators
        batch_size: Images per inference batch
    """

    iou_threshold: float = 0.5
    score_threshold: float = 0.5
    category_aware: bool = True
    min_object_size: float = 0.0
    batch_size: int = 4

    def __post_init__(self) -> None:
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("eval.iou_threshold must lie in (0, 1]")
        if self.min_object_size < 0 or self.batch_size < 1:
            raise ConfigError("invalid eval settings")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown eval settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class MapResult:
    """Mean AP over categories with ground truth, and AP per category.

    Values are fractions in ``[0, 1]``; a category without ground truth has AP
    ``None``.
    """

    mean_ap: float
    per_category: Dict[int, Optional[float]]


@dataclass
class RecallResult:
    """Attribute recall as a percentage, ``None`` when no object carries the label."""

    recall: Optional[float]
    recalled: int
    total: int


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP of a score-ordered list of hits.

    Args:
        tp: Whether each detection, in descending score order, is a true positive
        num_gt: Number of ground-truth objects

    Returns:
        Area under the monotone precision envelope of the precision-recall curve
    """
    if num_gt == 0:
        raise EvaluationError("average precision needs at least one ground truth")
    if len(tp) == 0:
        return 0.0
    hits = np.asarray(tp, dtype=np.float64)
    tp_cum = np.cumsum(hits)
    precision = tp_cum / np.arange(1, len(hits) + 1)
    recall = tp_cum / num_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def compute_map(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[ObjectAnnotation]],
    num_categories: int,
    iou_threshold: float = 0.5,
    categories: Optional[Iterable[int]] = None,
) -> MapResult:
    """Mean average precision at one IoU threshold.

    Per category, detections of all images are visited by descending score; a
    detection is a true positive when its best-overlapping ground truth of that
    category reaches ``iou_threshold`` and is not matched yet.

    Args:
        detections: Detections per image
        ground_truth: Annotations per image, aligned with ``detections``
        num_categories: Number of foreground categories
        iou_threshold: Match threshold
        categories: Restrict the mean to these categories

    Returns:
        The mean over categories with at least one ground-truth object
    """
    if len(detections) != len(ground_truth):
        raise EvaluationError("detections and ground truth cover different images")
    selected = sorted(set(range(num_categories) if categories is None else categories))
    per_category: Dict[int, Optional[float]] = {}
    for category in selected:
        gts = [[a.box for a in anns if a.category == category] for anns in ground_truth]
        num_gt = sum(len(g) for g in gts)
        if num_gt == 0:
            per_category[category] = None
            continue
        candidates = [
            (det.score, image, det)
            for image, dets in enumerate(detections)
            for det in dets
            if det.label == category
        ]
        # Stable: equal scores keep image then detection order.
        candidates.sort(key=lambda item: -item[0])
        matched = [[False] * len(g) for g in gts]
        tp = []
        for _, image, det in candidates:
            overlaps = [iou(det.box, box) for box in gts[image]]
            best = int(np.argmax(overlaps)) if overlaps else -1
            hit = (
                best >= 0
                and overlaps[best] >= iou_threshold
                and not matched[image][best]
            )
            if hit:
                matched[image][best] = True
            tp.append(hit)
        per_category[category] = average_precision(tp, num_gt)

    scored = [ap for ap in per_category.values() if ap is not None]
    return MapResult(float(np.mean(scored)) if scored else 0.0, per_category)


def _eligible(
    annotation: ObjectAnnotation,
    attribute: str,
    categories: Optional[FrozenSet[int]],
    min_object_size: float,
) -> bool:
    if getattr(annotation, attribute) is None:
        return False
    if categories is not None and annotation.category not in categories:
        return False
    box = annotation.box
    return min(box.width, box.height) >= min_object_size


def compute_attribute_recall(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[ObjectAnnotation]],
    attribute: str,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
    category_aware: bool = True,
    min_object_size: float = 0.0,
    categories: Optional[Iterable[int]] = None,
) -> RecallResult:
    """Share of attribute-labelled objects that are detected and recognised.

    An object counts when a detection scoring at least ``score_threshold`` overlaps
    it with IoU of at least ``iou_threshold``, has its category (unless
    ``category_aware`` is off) and predicts its ``attribute`` label as argmax.
    Detections are visited by descending score and each recalls at most one
    object, the highest-IoU qualifying one.

    Raises:
        EvaluationError: If ``attribute`` is unknown or detections carry no
            attribute distributions
    """
    if attribute not in ATTRIBUTES:
        raise EvaluationError(f"unknown attribute {attribute!r}")
    if len(detections) != len(ground_truth):
        raise EvaluationError("detections and ground truth cover different images")
    allowed = None if categories is None else frozenset(categories)

    recalled = 0
    total = 0
    for dets, anns in zip(detections, ground_truth):
        eligible = [
            a for a in anns if _eligible(a, attribute, allowed, min_object_size)
        ]
        total += len(eligible)
        if not eligible:
            continue
        done = [False] * len(eligible)
        ranked = sorted(
            (d for d in dets if d.score >= score_threshold), key=lambda d: -d.score
        )
        for det in ranked:
            scores = getattr(det, f"{attribute}_scores")
            if scores is None:
                raise EvaluationError(f"detections carry no {attribute} predictions")
            predicted = getattr(det, attribute)
            best, best_iou = -1, -1.0
            for j, ann in enumerate(eligible):
                if done[j] or predicted != getattr(ann, attribute):
                    continue
                if category_aware and det.label != ann.category:
                    continue
                overlap = iou(det.box, ann.box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best, best_iou = j, overlap
            if best >= 0:
                done[best] = True
                recalled += 1
    recall = 100.0 * recalled / total if total else None
    return RecallResult(recall, recalled, total)


@dataclass
class EvalReport:
    """Metrics of one model on one test set.

    Percentages lie in ``[0, 100]``. Recall values are ``None`` when the model has
    no attribute heads or no object carries the attribute. ``subgroups`` holds the
    same metrics restricted to the reference and target categories.
    """

    map_50: float
    color_recall_50: Optional[float]
    material_recall_50: Optional[float]
    per_category_ap: Dict[str, Optional[float]]
    counts: Dict[str, int]
    subgroups: Dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "map_50": self.map_50,
            "color_recall_50": self.color_recall_50,
            "material_recall_50": self.material_recall_50,
            "per_category_ap": dict(self.per_category_ap),
            "counts": dict(self.counts),
        }
        if self.subgroups:
            data["subgroups"] = {k: v.to_dict() for k, v in self.subgroups.items()}
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        return cls(
            map_50=data["map_50"],
            color_recall_50=data.get("color_recall_50"),
            material_recall_50=data.get("material_recall_50"),
            per_category_ap=dict(data.get("per_category_ap", {})),
            counts=dict(data.get("counts", {})),
            subgroups={
                k: cls.from_dict(v) for k, v in data.get("subgroups", {}).items()
            },
        )

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "map_50": self.map_50,
            "color_recall_50": self.color_recall_50,
            "material_recall_50": self.material_recall_50,
        }


def _report(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[ObjectAnnotation]],
    vocabulary: Vocabulary,
    config: EvalConfig,
    has_attributes: bool,
    categories: Optional[FrozenSet[int]],
) -> EvalReport:
    num_categories = len(vocabulary.categories)
    result = compute_map(
        detections, ground_truth, num_categories, config.iou_threshold, categories
    )
    recalls: Dict[str, Optional[RecallResult]] = {}
    for attribute in ATTRIBUTES:
        recalls[attribute] = None
        if has_attributes:
            recalls[attribute] = compute_attribute_recall(
                detections,
                ground_truth,
                attribute,
                config.iou_threshold,
                config.score_threshold,
                config.category_aware,
                config.min_object_size,
                categories,
            )
    counts = {
        "images": len(ground_truth),
        "objects": sum(
            1
            for anns in ground_truth
            for a in anns
            if categories is None or a.category in categories
        ),
    }
    for attribute, r in recalls.items():
        counts[attribute] = 0 if r is None else r.total
    color, material = recalls["color"], recalls["material"]
    return EvalReport(
        map_50=100.0 * result.mean_ap,
        color_recall_50=None if color is None else color.recall,
        material_recall_50=None if material is None else material.recall,
        per_category_ap={
            vocabulary.categories[c]: None if ap is None else 100.0 * ap
            for c, ap in result.per_category.items()
        },
        counts=counts,
    )


def evaluate_detections(
    detections: Sequence[Sequence[Detection]],
    samples: Sequence[DetectionSample],
    vocabulary: Vocabulary,
    config: EvalConfig = EvalConfig(),
    split: Optional[CategorySplit] = None,
    has_attributes: bool = True,
) -> EvalReport:
    """Build a report from precomputed detections.

    Args:
        detections: Detections per sample
        samples: Test samples with full annotations
        vocabulary: Vocabulary of the test set
        config: Metric settings
        split: Adds reference and target subgroup reports when given
        has_attributes: False for detection-only models

    Returns:
        Whole-set metrics plus optional subgroups
    """
    ground_truth = [s.annotations for s in samples]
    report = _report(detections, ground_truth, vocabulary, config, has_attributes, None)
    if split is not None:
        for name in SUBGROUPS:
            report.subgroups[name] = _report(
                detections,
                ground_truth,
                vocabulary,
                config,
                has_attributes,
                getattr(split, name),
            )
    return report


def run_inference(
    model: Detector, samples: Sequence[DetectionSample], batch_size: int = 4
) -> List[List[Detection]]:
    """Detections for every sample, batched, in sample order."""
    results: List[List[Detection]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        results.extend(predict(model, [s.load_image() for s in chunk]))
    return results


def evaluate(
    model: Detector,
    dataset: Dataset,
    config: EvalConfig = EvalConfig(),
    split: Optional[CategorySplit] = None,
) -> EvalReport:
    """Run the model over ``dataset`` and score it."""
    if dataset.vocabulary != model.vocabulary:
        raise EvaluationError("test set vocabulary differs from the model's")
    detections = run_inference(model, dataset.samples, config.batch_size)
    return evaluate_detections(
        detections,
        dataset.samples,
        dataset.vocabulary,
        config,
        split,
        model.variant.has_attributes,
    )


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if len(present) < len(values):
        return None
    return float(np.mean(present))


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of every metric; counts are summed.

    A metric missing from any report is missing from the average. Subgroups
    are averaged by name.
    """
    if not reports:
        raise EvaluationError("nothing to average")
    names = sorted({k for r in reports for k in r.per_category_ap})
    count_keys = sorted({k for r in reports for k in r.counts})
    subgroup_names = [k for k in SUBGROUPS if all(k in r.subgroups for r in reports)]
    map_50 = _mean([r.map_50 for r in reports])
    return EvalReport(
        map_50=0.0 if map_50 is None else map_50,
        color_recall_50=_mean([r.color_recall_50 for r in reports]),
        material_recall_50=_mean([r.material_recall_50 for r in reports]),
        per_category_ap={
            n: _mean([r.per_category_ap.get(n) for r in reports]) for n in names
        },
        counts={k: sum(r.counts.get(k, 0) for r in reports) for k in count_keys},
        subgroups={
            k: average_reports([r.subgroups[k] for r in reports]) for k in subgroup_names
        },
    )


@dataclass
class TransferRun:
    split: CategorySplit
    report: EvalReport


@dataclass
class TransferResult:
    runs: List[TransferRun]
    average: EvalReport


TrainFn = Callable[[int, CategorySplit, Dataset], Detector]


def transfer_splits(
    vocabulary: Vocabulary,
    seed: int,
    groups: Optional[Tuple[Sequence[str], Sequence[str]]] = None,
) -> Tuple[CategorySplit, CategorySplit]:
    """The two mirrored splits, from explicit groups or a seeded random halving."""
    if groups is not None:
        return split_from_groups(vocabulary, groups)
    return make_split(vocabulary, seed)


def run_transfer_protocol(
    train_fn: TrainFn,
    train_dataset: Dataset,
    test_dataset: Dataset,
    seed: int,
    config: EvalConfig = EvalConfig(),
    groups: Optional[Tuple[Sequence[str], Sequence[str]]] = None,
    console: Optional[Console] = None,
) -> TransferResult:
    """Train twice with mirrored splits and average the two evaluations.

    In each run the target categories lose their attribute labels in the training
    set only; the test set keeps every label.

    Args:
        train_fn: ``(run_index, split, masked_train_dataset) -> trained model``
        train_dataset: Fully annotated training set
        test_dataset: Fully annotated test set
        seed: Split seed, unused when ``groups`` is given
        config: Metric settings
        groups: Explicit category halves, defaults to ``train_dataset.groups``
        console: Receives one status line per run

    Returns:
        Both runs and their average

    Raises:
        ValueError: If the category count is odd or the groups are invalid
    """
    vocabulary = train_dataset.vocabulary
    splits = transfer_splits(vocabulary, seed, groups or train_dataset.groups)
    runs = []
    for index, split in enumerate(splits, start=1):
        if console is not None:
            target = ", ".join(vocabulary.categories[i] for i in sorted(split.target))
            console.print(f"[blue]→ Transfer run {index}/2[/blue] - target: {target}")
        masked = dataclasses.replace(
            train_dataset,
            samples=tuple(mask_target_attributes(train_dataset.samples, split)),
        )
        model = train_fn(index, split, masked)
        runs.append(TransferRun(split, evaluate(model, test_dataset, config, split)))
    return TransferResult(runs, average_reports([r.report for r in runs]))


def _cell(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.2f}"


def render_table(
    rows: Sequence[Tuple[str, EvalReport]], transfer: bool = False, title: str = ""
) -> Table:
    """Results table with one row per model.

    With ``transfer`` the rows are grouped into a Target block followed by a
    Reference block, each read from the matching subgroup.
    """
    table = Table(title=title or None)
    if transfer:
        table.add_column("Set")
    table.add_column("Model")
    for header in ("Object mAP @.5", "Color Recall @.5", "Material Recall @.5"):
        table.add_column(header, justify="right")

    def add(report: EvalReport, name: str, prefix: List[str]) -> None:
        table.add_row(
            *prefix,
            name,
            _cell(report.map_50),
            _cell(report.color_recall_50),
            _cell(report.material_recall_50),
        )

    if not transfer:
        for name, report in rows:
            add(report, name, [])
        return table
    for group in ("target", "reference"):
        for i, (name, report) in enumerate(rows):
            if group not in report.subgroups:
                raise EvaluationError(f"report for {name} lacks the {group} subgroup")
            add(report.subgroups[group], name, [group.title() if i == 0 else ""])
        if group == "target":
            table.add_section()
    return table


def render_category_table(report: EvalReport) -> Table:
    table = Table(title="Per-category AP @.5")
    table.add_column("Category")
    table.add_column("AP", justify="right")
    for name, ap in report.per_category_ap.items():
        table.add_row(name, _cell(ap))
    return table


def report_text(*renderables: Any, width: int = 100) -> str:
    """Plain-text rendering of rich tables."""
    buffer = io.StringIO()
    console = Console(file=buffer, width=width, color_system=None)
    for renderable in renderables:
        console.print(renderable)
    return buffer.getvalue()


def write_report(
    report: EvalReport,
    out_dir: Path,
    name: str,
    transfer: bool = False,
    stem: str = "report",
) -> Tuple[Path, Path]:
    """Write ``{stem}.json`` and the rendered ``{stem}.txt`` tables.

    Returns:
        Paths of the JSON and text files
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    text = report_text(
        render_table([(name, report)], transfer=transfer),
        render_category_table(report),
    )
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(text, encoding="utf-8")
    return json_path, txt_path
