# pyright: basic
"""Tests for detection mAP, attribute recall and the transfer protocol."""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from attrdet.datamodel import (
    VG20_GROUPS,
    CategorySplit,
    Dataset,
    Detection,
    DetectionSample,
    ObjectAnnotation,
    Vocabulary,
)
from attrdet.errors import ConfigError, EvaluationError
from attrdet.evaluation import (
    EvalConfig,
    EvalReport,
    average_precision,
    average_reports,
    compute_attribute_recall,
    compute_map,
    evaluate,
    evaluate_detections,
    render_table,
    report_text,
    run_transfer_protocol,
    transfer_splits,
    write_report,
)
from attrdet.geometry import Box
from attrdet.model.detector import ModelVariant

VOCAB = Vocabulary(("car", "cat"), ("red", "green", "blue"), ("wood", "metal"))


def one_hot(index, size):
    scores = np.zeros(size)
    scores[index] = 1.0
    return scores


def detection(box, label, score, color=None, material=None) -> Detection:
    return Detection(
        box=Box(*box),
        label=label,
        score=score,
        category_scores=one_hot(label + 1, 3),
        color_scores=None if color is None else one_hot(color, 3),
        material_scores=None if material is None else one_hot(material, 2),
    )


def random_attribute_scene(seed, images=8, objects=6):
    """Overlapping labelled objects with noisy, partly mislabelled detections."""
    rng = np.random.default_rng(seed)
    gt, dets = [], []
    for _ in range(images):
        anns, preds = [], []
        for _ in range(objects):
            x, y = (float(v) for v in rng.uniform(0, 40, size=2))
            size = float(rng.uniform(8, 20))
            box = np.array([x, y, x + size, y + size])
            category = int(rng.integers(0, 2))
            color = int(rng.integers(0, 3)) if rng.random() < 0.8 else None
            material = int(rng.integers(0, 2)) if rng.random() < 0.8 else None
            anns.append(ObjectAnnotation(Box(*box.tolist()), category, color, material))
            for _ in range(int(rng.integers(0, 3))):
                jittered = np.clip(box + rng.uniform(-3, 3, size=4), 0, 64)
                label = category if rng.random() < 0.8 else 1 - category
                preds.append(
                    detection(
                        tuple(jittered.tolist()),
                        label,
                        float(rng.random()),
                        color=int(rng.integers(0, 3)),
                        material=int(rng.integers(0, 2)),
                    )
                )
        gt.append(anns)
        dets.append(preds)
    return dets, gt


def brute_force_ap(hits, num_gt):
    """Sum over true positives of the best precision at or after their rank."""
    precisions = [sum(hits[: i + 1]) / (i + 1) for i in range(len(hits))]
    return sum(
        max(precisions[i:]) / num_gt for i, hit in enumerate(hits) if hit
    )


def report(map_50, color=None, material=None, **kwargs) -> EvalReport:
    return EvalReport(
        map_50=map_50,
        color_recall_50=color,
        material_recall_50=material,
        per_category_ap=kwargs.get("per_category_ap", {}),
        counts=kwargs.get("counts", {}),
        subgroups=kwargs.get("subgroups", {}),
    )


class TestEvalConfig:
    """Test metric settings."""

    def test_from_dict(self):
        """Test building from a mapping."""
        config = EvalConfig.from_dict({"iou_threshold": 0.7, "category_aware": False})
        assert config.iou_threshold == 0.7
        assert not config.category_aware

    def test_unknown_key(self):
        """Test that unknown settings raise ConfigError."""
        with pytest.raises(ConfigError):
            EvalConfig.from_dict({"iou": 0.5})

    def test_threshold_range(self):
        """Test that the IoU threshold must lie in (0, 1]."""
        with pytest.raises(ConfigError):
            EvalConfig(iou_threshold=0.0)


class TestAveragePrecision:
    """Test the all-points interpolated AP."""

    def test_perfect(self):
        """Test that hits only give AP 1."""
        assert average_precision([True, True, True], 3) == pytest.approx(1.0)

    def test_no_detections(self):
        """Test that nothing detected gives AP 0."""
        assert average_precision([], 4) == 0.0

    def test_needs_ground_truth(self):
        """Test that AP without ground truth is an error."""
        with pytest.raises(EvaluationError):
            average_precision([True], 0)

    def test_known_value(self):
        """Test a hand-computed curve."""
        # precision 1 at recall 0.5, envelope 2/3 at recall 1.0
        assert average_precision([True, False, True], 2) == pytest.approx(0.5 + 1 / 3)

    def test_matches_brute_force(self):
        """Test against a direct computation on random hit lists."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            hits = (rng.random(200) < 0.4).tolist()
            num_gt = sum(hits) + int(rng.integers(0, 20))
            if num_gt == 0:
                continue
            assert average_precision(hits, num_gt) == pytest.approx(
                brute_force_ap(hits, num_gt), abs=1e-9
            )


class TestComputeMap:
    """Test per-category AP and the mean."""

    gt = [
        [
            ObjectAnnotation(Box(0, 0, 10, 10), 0, 0, 0),
            ObjectAnnotation(Box(20, 20, 40, 40), 1, 1, 1),
        ]
    ]

    def test_perfect_predictions(self):
        """Test that exact boxes give mAP 1."""
        dets = [[detection((0, 0, 10, 10), 0, 0.9), detection((20, 20, 40, 40), 1, 0.8)]]
        result = compute_map(dets, self.gt, 2)
        assert result.mean_ap == pytest.approx(1.0)
        assert result.per_category == {0: pytest.approx(1.0), 1: pytest.approx(1.0)}

    def test_no_predictions(self):
        """Test that an empty prediction set gives 0."""
        assert compute_map([[]], self.gt, 2).mean_ap == 0.0

    def test_duplicate_is_false_positive(self):
        """Test that a second detection of a matched object does not count."""
        gt = [[ObjectAnnotation(Box(0, 0, 10, 10), 0)]]
        dets = [[detection((0, 0, 10, 10), 0, 0.9), detection((0, 0, 10, 10), 0, 0.8)]]
        assert compute_map(dets, gt, 1).mean_ap == pytest.approx(1.0)
        dets = [[detection((0, 0, 10, 10), 0, 0.8), detection((30, 30, 40, 40), 0, 0.9)]]
        assert compute_map(dets, gt, 1).mean_ap == pytest.approx(0.5)

    def test_category_without_ground_truth_skipped(self):
        """Test that categories with no objects are left out of the mean."""
        gt = [[ObjectAnnotation(Box(0, 0, 10, 10), 0)]]
        dets = [[detection((0, 0, 10, 10), 0, 0.9), detection((0, 0, 5, 5), 1, 0.9)]]
        result = compute_map(dets, gt, 2)
        assert result.per_category[1] is None
        assert result.mean_ap == pytest.approx(1.0)

    def test_matches_brute_force_on_random_scenes(self):
        """Test mAP on 200 random objects against a per-category oracle."""
        rng = np.random.default_rng(1)
        gt, dets = [], []
        for image in range(20):
            anns, preds = [], []
            for k in range(10):
                x = 40.0 * k
                category = int(rng.integers(0, 2))
                anns.append(ObjectAnnotation(Box(x, 0, x + 20, 20), category))
                if rng.random() < 0.7:
                    shift = float(rng.choice([0.0, 15.0]))
                    preds.append(
                        detection(
                            (x + shift, 0, x + shift + 20, 20),
                            category,
                            float(rng.random()),
                        )
                    )
            gt.append(anns)
            dets.append(preds)
        result = compute_map(dets, gt, 2)
        for category in (0, 1):
            ranked = sorted(
                (
                    (d.score, d.box.x1 == int(d.box.x1 / 40) * 40.0)
                    for preds in dets
                    for d in preds
                    if d.label == category
                ),
                key=lambda item: -item[0],
            )
            num_gt = sum(a.category == category for anns in gt for a in anns)
            expected = brute_force_ap([hit for _, hit in ranked], num_gt)
            assert result.per_category[category] == pytest.approx(expected, abs=1e-9)


class TestAttributeRecall:
    """Test attribute recall."""

    gt = [
        [
            ObjectAnnotation(Box(0, 0, 10, 10), 0, 0, 0),
            ObjectAnnotation(Box(20, 0, 30, 10), 0, 1, 1),
            ObjectAnnotation(Box(40, 0, 50, 10), 1, 2, None),
            ObjectAnnotation(Box(60, 0, 70, 10), 1),
        ]
    ]

    def test_two_of_three(self):
        """Test one wrong color out of three labelled objects."""
        dets = [
            [
                detection((0, 0, 10, 10), 0, 0.9, color=0, material=0),
                detection((20, 0, 30, 10), 0, 0.9, color=1, material=0),
                detection((40, 0, 50, 10), 1, 0.9, color=0, material=1),
            ]
        ]
        result = compute_attribute_recall(dets, self.gt, "color")
        assert (result.recalled, result.total) == (2, 3)
        assert result.recall == pytest.approx(200 / 3)

    def test_category_aware(self):
        """Test that a wrong category only counts when category-agnostic."""
        dets = [[detection((0, 0, 10, 10), 1, 0.9, color=0, material=0)]]
        aware = compute_attribute_recall(dets, self.gt, "color")
        agnostic = compute_attribute_recall(dets, self.gt, "color", category_aware=False)
        assert aware.recalled == 0
        assert agnostic.recalled == 1

    def test_score_threshold(self):
        """Test that low-scoring detections are ignored."""
        dets = [[detection((0, 0, 10, 10), 0, 0.3, color=0, material=0)]]
        assert compute_attribute_recall(dets, self.gt, "material").recalled == 0

    def test_each_detection_recalls_once(self):
        """Test that one detection cannot recall two objects."""
        gt = [
            [
                ObjectAnnotation(Box(0, 0, 10, 10), 0, 0, 0),
                ObjectAnnotation(Box(0, 0, 10, 10), 0, 0, 0),
            ]
        ]
        dets = [[detection((0, 0, 10, 10), 0, 0.9, color=0, material=0)]]
        assert compute_attribute_recall(dets, gt, "color").recalled == 1

    def test_min_object_size(self):
        """Test that small objects leave the denominator."""
        result = compute_attribute_recall([[]], self.gt, "color", min_object_size=11)
        assert result.total == 0
        assert result.recall is None

    def test_restricted_categories(self):
        """Test recall over a category subset."""
        result = compute_attribute_recall([[]], self.gt, "color", categories=[1])
        assert result.total == 1

    def test_recall_monotone_in_score_threshold(self):
        """Test that raising the score threshold never recalls more objects."""
        dets, gt = random_attribute_scene(seed=5)
        for attribute in ("color", "material"):
            for category_aware in (True, False):
                recalled = [
                    compute_attribute_recall(
                        dets,
                        gt,
                        attribute,
                        score_threshold=float(t),
                        category_aware=category_aware,
                    ).recalled
                    for t in np.linspace(0.0, 1.0, 21)
                ]
                assert all(a >= b for a, b in zip(recalled, recalled[1:])), recalled
                assert recalled[0] > 0

    def test_detections_without_attributes(self):
        """Test that detection-only output cannot be scored for attributes."""
        dets = [[detection((0, 0, 10, 10), 0, 0.9)]]
        with pytest.raises(EvaluationError):
            compute_attribute_recall(dets, self.gt, "color")

    def test_unknown_attribute(self):
        """Test that only color and material are scored."""
        with pytest.raises(EvaluationError):
            compute_attribute_recall([[]], self.gt, "shape")


class TestEvaluateDetections:
    """Test report assembly."""

    def sample(self):
        return DetectionSample(
            "a",
            64,
            64,
            (
                ObjectAnnotation(Box(0, 0, 10, 10), 0, 0, 0),
                ObjectAnnotation(Box(20, 20, 40, 40), 1, 1, 1),
            ),
        )

    def test_perfect_report_with_subgroups(self):
        """Test a perfect prediction scored as 100 everywhere."""
        dets = [
            [
                detection((0, 0, 10, 10), 0, 0.9, color=0, material=0),
                detection((20, 20, 40, 40), 1, 0.9, color=1, material=1),
            ]
        ]
        split = CategorySplit(reference=frozenset({0}), target=frozenset({1}))
        result = evaluate_detections(dets, [self.sample()], VOCAB, split=split)
        assert result.map_50 == pytest.approx(100.0)
        assert result.color_recall_50 == pytest.approx(100.0)
        assert result.per_category_ap == {
            "car": pytest.approx(100.0),
            "cat": pytest.approx(100.0),
        }
        assert result.subgroups["target"].counts["objects"] == 1
        assert result.counts == {"images": 1, "objects": 2, "color": 2, "material": 2}

    def test_empty_predictions(self):
        """Test that no detections give zero mAP and recall."""
        result = evaluate_detections([[]], [self.sample()], VOCAB)
        assert result.map_50 == 0.0
        assert result.color_recall_50 == 0.0

    def test_detection_only(self):
        """Test that recall is absent without attribute heads."""
        result = evaluate_detections([[]], [self.sample()], VOCAB, has_attributes=False)
        assert result.color_recall_50 is None
        assert result.material_recall_50 is None

    def test_subgroups_partition_whole_set(self):
        """Test that reference and target reports add up to the whole-set report."""
        dets, gt = random_attribute_scene(seed=9)
        samples = [
            DetectionSample(f"img{i}", 64, 64, tuple(anns)) for i, anns in enumerate(gt)
        ]
        split = CategorySplit(reference=frozenset({0}), target=frozenset({1}))
        whole = evaluate_detections(dets, samples, VOCAB, split=split)
        reference, target = whole.subgroups["reference"], whole.subgroups["target"]

        assert reference.counts["images"] == target.counts["images"] == len(samples)
        for key in ("objects", "color", "material"):
            assert reference.counts[key] + target.counts[key] == whole.counts[key]
        assert reference.per_category_ap == {"car": whole.per_category_ap["car"]}
        assert target.per_category_ap == {"cat": whole.per_category_ap["cat"]}
        assert reference.map_50 == pytest.approx(whole.per_category_ap["car"])
        for attribute in ("color", "material"):
            recall = f"{attribute}_recall_50"
            recalled = sum(
                getattr(part, recall) * part.counts[attribute] for part in (reference, target)
            )
            assert recalled == pytest.approx(getattr(whole, recall) * whole.counts[attribute])
            parts = [
                compute_attribute_recall(dets, gt, attribute, categories=[c]).recalled
                for c in (0, 1)
            ]
            assert sum(parts) == compute_attribute_recall(dets, gt, attribute).recalled

    def test_vocabulary_mismatch(self, tiny_model, tiny_dataset):
        """Test that a model cannot be scored on another vocabulary."""
        model = tiny_model(ModelVariant.SINGLE_STREAM, tiny_dataset.vocabulary)
        other = Dataset(samples=(), vocabulary=VOCAB)
        with pytest.raises(EvaluationError):
            evaluate(model, other)


class TestAverageReports:
    """Test averaging of transfer runs."""

    def test_mean(self):
        """Test that 40 and 60 average to 50."""
        avg = average_reports([report(40.0, 30.0), report(60.0, 50.0)])
        assert avg.map_50 == pytest.approx(50.0)
        assert avg.color_recall_50 == pytest.approx(40.0)
        assert avg.material_recall_50 is None

    def test_missing_everywhere_stays_missing(self):
        """Test that a metric absent from every run stays absent."""
        avg = average_reports(
            [
                report(10.0, per_category_ap={"car": 20.0, "cat": None}),
                report(20.0, per_category_ap={"car": 40.0, "cat": None}),
            ]
        )
        assert avg.per_category_ap == {"car": pytest.approx(30.0), "cat": None}

    def test_missing_in_one_run(self):
        """Test that a metric absent from one run is absent from the mean."""
        avg = average_reports(
            [
                report(10.0, 30.0, 20.0, per_category_ap={"car": 20.0}),
                report(20.0, None, 40.0, per_category_ap={"car": None}),
            ]
        )
        assert avg.color_recall_50 is None
        assert avg.material_recall_50 == pytest.approx(30.0)
        assert avg.per_category_ap == {"car": None}

    def test_counts_and_subgroups(self):
        """Test summed counts and averaged subgroups."""
        first = report(0.0, counts={"images": 2}, subgroups={"target": report(10.0)})
        second = report(0.0, counts={"images": 3}, subgroups={"target": report(30.0)})
        avg = average_reports([first, second])
        assert avg.counts == {"images": 5}
        assert avg.subgroups["target"].map_50 == pytest.approx(20.0)

    def test_empty(self):
        """Test that averaging nothing is an error."""
        with pytest.raises(EvaluationError):
            average_reports([])


class TestTransferProtocol:
    """Test the two-run transfer protocol."""

    def test_mirrored_runs(self, tiny_model, tiny_dataset):
        """Test mirrored splits, masked training data and the averaged report."""
        calls = []

        def train_fn(index, split, dataset):
            calls.append((index, split, dataset))
            return tiny_model(ModelVariant.SINGLE_STREAM, dataset.vocabulary, seed=index)

        result = run_transfer_protocol(train_fn, tiny_dataset, tiny_dataset, seed=0)
        assert [c[0] for c in calls] == [1, 2]
        first, second = calls[0][1], calls[1][1]
        assert first.reference == second.target
        assert first.target == second.reference
        for _, split, dataset in calls:
            for sample in dataset.samples:
                for ann in sample.annotations:
                    if ann.category in split.target:
                        assert not ann.has_attributes
        assert len(result.runs) == 2
        expected = average_reports([r.report for r in result.runs])
        assert result.average.map_50 == pytest.approx(expected.map_50)
        assert set(result.average.subgroups) == {"reference", "target"}

    def test_explicit_groups(self, tiny_model, tiny_dataset):
        """Test that explicit groups fix the first split."""
        splits = []

        def train_fn(index, split, dataset):
            splits.append(split)
            return tiny_model(ModelVariant.DETECTION_ONLY, dataset.vocabulary)

        run_transfer_protocol(
            train_fn, tiny_dataset, tiny_dataset, 0, groups=(["square"], ["circle"])
        )
        assert splits[0] == CategorySplit(frozenset({1}), frozenset({0}))

    def test_vg20_groups(self):
        """Test mirrored splits from the fixed two-group division."""
        vocabulary = Vocabulary.default()
        first, second = transfer_splits(vocabulary, 0, VG20_GROUPS)
        assert first.reference == frozenset(
            vocabulary.category_index(name) for name in VG20_GROUPS[0]
        )
        assert second == first.mirrored()
        assert first.covers(len(vocabulary.categories))


class TestRendering:
    """Test result tables and report files."""

    def test_transfer_table_order(self):
        """Test that the Target block comes before the Reference block."""
        rows = [
            (
                "two-stream",
                report(
                    50.0,
                    subgroups={"target": report(40.0, 10.0), "reference": report(60.0)},
                ),
            )
        ]
        text = report_text(render_table(rows, transfer=True))
        assert text.index("Target") < text.index("Reference")
        assert "40.00" in text and "10.00" in text

    def test_transfer_table_needs_subgroups(self):
        """Test that a report without subgroups cannot fill a transfer table."""
        with pytest.raises(EvaluationError):
            render_table([("m", report(1.0))], transfer=True)

    def test_missing_value_cell(self):
        """Test that absent metrics render as a dash."""
        text = report_text(render_table([("detector", report(12.345))]))
        assert "12.35" in text
        assert "-" in text

    def test_write_report(self):
        """Test the JSON and text outputs."""
        original = report(
            55.0, 20.0, 30.0, per_category_ap={"car": 55.0}, counts={"images": 1}
        )
        with tempfile.TemporaryDirectory() as temp_dir:
            json_path, txt_path = write_report(original, Path(temp_dir), "pa-sce")
            data = json.loads(json_path.read_text(encoding="utf-8"))
            text = txt_path.read_text(encoding="utf-8")
        assert json_path.name == "report.json"
        assert EvalReport.from_dict(data) == original
        assert "pa-sce" in text
        assert "car" in text
