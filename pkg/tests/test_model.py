# pyright: basic
"""Tests for the detection network and its variant wiring."""

import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
import torch

from attrdet.datamodel import Vocabulary
from attrdet.errors import ModelError
from attrdet.model.checkpoint import checkpoint_path, load_checkpoint, save_checkpoint
from attrdet.model.detector import (
    DetectorConfig,
    ModelVariant,
    build_model,
    images_to_tensor,
    predict,
)
from attrdet.model.heads import AttributeHead
from attrdet.model.roi import StreamFeatures, assign_levels, pool_roi_features
from attrdet.model.rpn import AnchorConfig, AnchorGenerator, anchor_count

from .conftest import TINY_BACKBONE, TINY_DETECTOR

BOXES = [torch.tensor([[4.0, 6.0, 30.0, 28.0], [20.0, 18.0, 60.0, 50.0]])]


def blank_image(size: int = 64) -> np.ndarray:
    return np.full((size, size, 3), 128, dtype=np.uint8)


def head_outputs(model, image=None, labels=None):
    model.eval()
    with torch.no_grad():
        batch, _ = model.preprocess([blank_image() if image is None else image])
        object_maps, attribute_maps = model.backbone_features(batch)
        return model.classify(object_maps, attribute_maps, BOXES, labels)


def randomize(model, stream: str) -> None:
    with torch.no_grad():
        for _, param in model.stream_parameters(stream):
            param.normal_(0.0, 0.5)


class TestModelVariant:
    """Test variant names and properties."""

    @pytest.mark.parametrize(
        "name, expected",
        [
            ("TwoStream+CrossLink", ModelVariant.TWO_STREAM_CROSS_LINK),
            ("two_stream_lfe", ModelVariant.TWO_STREAM_LFE),
            ("ts", ModelVariant.TWO_STREAM),
            ("SS-Detection-Only", ModelVariant.DETECTION_ONLY),
            ("PA+UCE", ModelVariant.PA_UCE),
            ("single-stream", ModelVariant.SINGLE_STREAM),
        ],
    )
    def test_parse(self, name, expected):
        """Test that loose spellings resolve."""
        assert ModelVariant.parse(name) is expected

    def test_parse_unknown_lists_valid_names(self):
        """Test that an unknown name lists every valid variant."""
        with pytest.raises(ModelError) as excinfo:
            ModelVariant.parse("three-stream")
        for variant in ModelVariant:
            assert variant.value in str(excinfo.value)

    def test_properties(self):
        """Test the wiring flags."""
        assert ModelVariant.TWO_STREAM_LFE.is_two_stream
        assert not ModelVariant.PA_SCE.is_two_stream
        assert ModelVariant.PA_UCE.attribute_loss == "uce"
        assert ModelVariant.SINGLE_STREAM.attribute_loss == "sce"
        assert ModelVariant.DETECTION_ONLY.attribute_loss is None
        assert ModelVariant.TWO_STREAM_CROSS_LINK.cross_link


class TestBuildModel:
    """Test structural wiring of every variant."""

    def test_single_stream_has_one_backbone(self, tiny_model, vocabulary):
        """Test that single-stream variants have no attribute stream."""
        for variant in ("single-stream", "pa-sce", "pa-uce", "ss-detection-only"):
            model = tiny_model(variant, vocabulary)
            assert model.attribute_backbone is None
            assert model.attribute_roi is None

    def test_two_stream_has_two_backbones(self, tiny_model, vocabulary):
        """Test that two-stream variants duplicate backbone and RoI extractor."""
        model = tiny_model("two-stream", vocabulary)
        report = model.parameter_report()
        assert report["attribute_backbone"] == report["object_backbone"]
        assert report["attribute_roi"] == report["object_roi"]
        single = tiny_model("single-stream", vocabulary).parameter_report()
        assert report["total"] > single["total"]
        assert "attribute_backbone" not in single

    def test_category_logits_include_background(self, tiny_model):
        """Test that 5 categories give 6 category logits."""
        vocab = Vocabulary(("a", "b", "c", "d", "e"))
        outputs = head_outputs(tiny_model("two-stream", vocab))
        assert outputs.category_logits.shape == (2, 6)
        assert outputs.box_deltas.shape == (2, 5, 4)

    def test_label_embedding_rows(self, tiny_model, vocabulary):
        """Test that the PA embedding table has one row per class."""
        model = tiny_model("pa-sce", vocabulary)
        assert model.label_embedding is not None
        assert model.label_embedding.embedding.num_embeddings == 4

    def test_detection_only_has_no_attribute_head(self, tiny_model, vocabulary):
        """Test that detection-only outputs carry no attribute logits."""
        model = tiny_model("ss-detection-only", vocabulary)
        assert model.attribute_head is None
        outputs = head_outputs(model)
        assert not outputs.has_attributes

    def test_attribute_shapes(self, tiny_model, vocabulary):
        """Test color and material logit shapes for split and unified heads."""
        sce = head_outputs(tiny_model("two-stream-cross-link", vocabulary))
        assert sce.color_logits.shape == (2, 4)
        assert sce.material_logits.shape == (2, 2)
        assert sce.attribute_logits is None
        uce = head_outputs(tiny_model("pa-uce", vocabulary))
        assert uce.attribute_logits.shape == (2, 6)
        assert torch.equal(uce.color_logits, uce.attribute_logits[:, :4])

    def test_late_fusion_heads_take_both_streams(self, tiny_model, vocabulary):
        """Test that LFE heads read the concatenated stream features."""
        model = tiny_model("two-stream-lfe", vocabulary)
        dim = TINY_DETECTOR.representation_size
        assert model.object_head.cls_score.in_features == 2 * dim
        assert model.attribute_head.color.in_features == 2 * dim

    def test_cross_link_head_input(self, tiny_model, vocabulary):
        """Test that cross-linked attribute layers see both streams."""
        model = tiny_model("two-stream-cross-link", vocabulary)
        dim = TINY_DETECTOR.representation_size
        assert model.attribute_head.color.in_features == 2 * dim
        assert model.attribute_head.material.in_features == 2 * dim

    def test_cross_link_material_only(self, vocabulary):
        """Test linking the object features into the material layer only."""
        config = DetectorConfig(
            representation_size=32, embedding_dim=8, cross_link_targets="material"
        )
        model = build_model("two-stream-cross-link", vocabulary, TINY_BACKBONE, config)
        assert model.attribute_head.color.in_features == 32
        assert model.attribute_head.material.in_features == 64


class TestAnchors:
    """Test anchor generation."""

    def test_closed_form_count(self):
        """Test the anchor count of a 64x64 image at strides 8 and 16."""
        config = AnchorConfig(scales=(2.0, 4.0, 8.0), ratios=(0.5, 1.0, 2.0))
        assert anchor_count(64, 64, (8, 16), config) == 720
        grids = AnchorGenerator((8, 16), config).grid_anchors([(8, 8), (4, 4)])
        assert sum(len(g) for g in grids) == 720

    def test_cell_anchor_shapes(self):
        """Test that cell anchors keep area and follow the aspect ratio."""
        generator = AnchorGenerator((16,), AnchorConfig((2.0,), (0.5, 2.0)))
        anchors = generator.cell_anchors(16)
        widths = anchors[:, 2] - anchors[:, 0]
        heights = anchors[:, 3] - anchors[:, 1]
        assert torch.allclose(widths * heights, torch.full((2,), 32.0**2))
        assert torch.allclose(heights / widths, torch.tensor([0.5, 2.0]))


class TestRPN:
    """Test proposal generation."""

    def test_blank_image_proposals_valid(self, tiny_model, vocabulary):
        """Test that an untrained RPN yields in-bounds sorted proposals."""
        model = tiny_model("two-stream", vocabulary).eval()
        with torch.no_grad():
            batch, sizes = model.preprocess([blank_image(), blank_image(48)])
            proposals, output = model.forward_rpn(batch, sizes)
        assert len(proposals) == 2
        for props, (h, w) in zip(proposals, sizes):
            assert 0 < len(props) <= TINY_DETECTOR.rpn.post_nms_top_n_test
            assert (props.boxes[:, 0] >= 0).all() and (props.boxes[:, 2] <= w).all()
            assert (props.boxes[:, 1] >= 0).all() and (props.boxes[:, 3] <= h).all()
            assert (props.boxes[:, 2] > props.boxes[:, 0]).all()
            scores = props.objectness
            assert torch.all(scores[:-1] >= scores[1:])
            for proposal in props.to_list():
                assert 0.0 <= proposal.objectness <= 1.0
        assert output.objectness.shape == output.deltas.shape[:2]
        assert output.anchors.shape == (output.objectness.shape[1], 4)

    def test_train_cap_differs(self, tiny_model, vocabulary):
        """Test that training mode uses the training proposal cap."""
        model = tiny_model("single-stream", vocabulary).train()
        with torch.no_grad():
            batch, sizes = model.preprocess([blank_image()])
            proposals, _ = model.forward_rpn(batch, sizes)
        assert len(proposals[0]) <= TINY_DETECTOR.rpn.post_nms_top_n_train

    def test_proposals_carry_no_gradient(self, tiny_model, vocabulary):
        """Test that proposal boxes are detached from the network."""
        model = tiny_model("single-stream", vocabulary)
        batch, sizes = model.preprocess([blank_image()])
        proposals, output = model.forward_rpn(batch, sizes)
        assert not proposals[0].boxes.requires_grad
        assert output.objectness.requires_grad


class TestRoIPooling:
    """Test multi-level RoI pooling."""

    def test_canonical_box_maps_to_canonical_level(self):
        """Test the level formula on a 224x224 box."""
        boxes = torch.tensor([[0.0, 0.0, 224.0, 224.0], [0.0, 0.0, 112.0, 112.0]])
        assert assign_levels(boxes, 2, 5).tolist() == [4, 3]

    def test_levels_clamped(self):
        """Test that tiny and huge boxes clamp to the pyramid range."""
        boxes = torch.tensor([[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 4000.0, 4000.0]])
        assert assign_levels(boxes, 2, 5).tolist() == [2, 5]

    def test_constant_field(self):
        """Test that pooling a constant map returns the constant."""
        feature = torch.full((1, 2, 16, 16), 3.0)
        rois = torch.tensor([[0.0, 16.0, 16.0, 64.0, 64.0]])
        pooled = pool_roi_features([feature], (3,), rois, output_size=4)
        assert pooled.shape == (1, 2, 4, 4)
        assert torch.allclose(pooled, torch.full_like(pooled, 3.0))

    def test_identical_rois_identical_features(self):
        """Test that the same box pools the same values."""
        torch.manual_seed(0)
        feature = torch.randn(1, 3, 16, 16)
        rois = torch.tensor([[0.0, 5.0, 7.0, 40.0, 33.0]] * 2)
        pooled = pool_roi_features([feature], (2,), rois)
        assert torch.equal(pooled[0], pooled[1])

    def test_gradcheck_features(self):
        """Test pooling gradients against finite differences."""
        torch.manual_seed(0)
        feature = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
        rois = torch.tensor([[0.0, 2.3, 3.1, 17.7, 19.2]], dtype=torch.float64)
        assert torch.autograd.gradcheck(
            lambda f: pool_roi_features([f], (2,), rois, output_size=2),
            (feature,),
            eps=1e-6,
            atol=1e-4,
            rtol=1e-4,
        )

    def test_no_gradient_to_boxes(self):
        """Test that RoI coordinates receive no gradient."""
        feature = torch.randn(1, 2, 8, 8, requires_grad=True)
        rois = torch.tensor([[0.0, 1.0, 1.0, 20.0, 20.0]], requires_grad=True)
        pool_roi_features([feature], (2,), rois).sum().backward()
        assert rois.grad is None
        assert feature.grad is not None

    def test_stream_features(self, tiny_model, vocabulary):
        """Test one fixed-size vector per box and stream tags."""
        model = tiny_model("two-stream", vocabulary).eval()
        with torch.no_grad():
            batch, _ = model.preprocess([blank_image()])
            object_maps, attribute_maps = model.backbone_features(batch)
            obj = model.extract_roi_features("object", object_maps, BOXES)
            attr = model.extract_roi_features("attribute", attribute_maps, BOXES)
        assert obj.features.shape == (2, TINY_DETECTOR.representation_size)
        assert (obj.stream, attr.stream) == ("object", "attribute")
        assert torch.isfinite(attr.features).all()

    def test_single_stream_has_no_attribute_extractor(self, tiny_model, vocabulary):
        """Test that asking a single-stream model for attribute features fails."""
        model = tiny_model("single-stream", vocabulary)
        with pytest.raises(ModelError):
            model.extract_roi_features("attribute", [], BOXES)


class TestStreamIsolation:
    """Test which parameters can influence which outputs."""

    def test_attribute_stream_cannot_change_detection(self, tiny_model, vocabulary):
        """Test that randomizing the attribute stream leaves detection bit-identical."""
        model = tiny_model("two-stream", vocabulary)
        before = head_outputs(model)
        randomize(model, "attribute")
        after = head_outputs(model)
        assert torch.equal(before.category_logits, after.category_logits)
        assert torch.equal(before.box_deltas, after.box_deltas)
        assert not torch.equal(before.color_logits, after.color_logits)

    def test_object_stream_cannot_change_attributes(self, tiny_model, vocabulary):
        """Test that randomizing the object stream leaves attributes bit-identical."""
        model = tiny_model("two-stream", vocabulary)
        before = head_outputs(model)
        randomize(model, "object")
        after = head_outputs(model)
        assert torch.equal(before.color_logits, after.color_logits)
        assert torch.equal(before.material_logits, after.material_logits)
        assert not torch.equal(before.category_logits, after.category_logits)

    def test_cross_link_reads_object_stream(self, tiny_model, vocabulary):
        """Test that the cross link feeds object features forward only."""
        model = tiny_model("two-stream-cross-link", vocabulary)
        before = head_outputs(model)
        randomize(model, "attribute")
        after = head_outputs(model)
        assert torch.equal(before.category_logits, after.category_logits)

        model = tiny_model("two-stream-cross-link", vocabulary)
        randomize(model, "object")
        linked = head_outputs(model)
        assert not torch.equal(before.color_logits, linked.color_logits)

    def test_zeroed_cross_features_change_attributes_only(self, tiny_model, vocabulary):
        """Test that removing the linked copy moves attribute logits only."""
        model = tiny_model("two-stream-cross-link", vocabulary)
        with torch.no_grad():
            model.attribute_head.color.weight.normal_()
            obj = StreamFeatures(torch.rand(3, 32), "object")
            attr = StreamFeatures(torch.rand(3, 32), "attribute")
            full = model.attribute_head(attr.features, obj.features)
            zeroed = model.attribute_head(attr.features, torch.zeros_like(obj.features))
            outputs = model.forward_heads(obj, attr)
        assert not torch.equal(full[0], zeroed[0])
        assert torch.equal(outputs.color_logits, full[0])

    def test_cross_link_blocks_gradient(self, tiny_model, vocabulary):
        """Test that attribute logits send no gradient into the object stream."""
        model = tiny_model("two-stream-cross-link", vocabulary)
        batch, _ = model.preprocess([blank_image()])
        object_maps, attribute_maps = model.backbone_features(batch)
        outputs = model.classify(object_maps, attribute_maps, BOXES)
        (outputs.color_logits.sum() + outputs.material_logits.sum()).backward()
        for name, param in model.stream_parameters("object"):
            assert param.grad is None or not param.grad.any(), name
        assert any(
            p.grad is not None and p.grad.any()
            for _, p in model.stream_parameters("attribute")
        )

    def test_late_fusion_passes_gradient(self, tiny_model, vocabulary):
        """Test that LFE attribute logits do reach the object stream."""
        model = tiny_model("two-stream-lfe", vocabulary)
        batch, _ = model.preprocess([blank_image()])
        object_maps, attribute_maps = model.backbone_features(batch)
        outputs = model.classify(object_maps, attribute_maps, BOXES)
        outputs.color_logits.sum().backward()
        assert any(
            p.grad is not None and p.grad.any()
            for _, p in model.stream_parameters("object")
        )

    def test_single_stream_shares_features(self, tiny_model, vocabulary):
        """Test that ablating a shared feature channel moves both heads."""
        model = tiny_model("single-stream", vocabulary)
        with torch.no_grad():
            features = torch.rand(4, 32) + 0.5
            ablated = features.clone()
            ablated[:, 0] = 0.0
            shared = StreamFeatures(features, "object")
            cut = StreamFeatures(ablated, "object")
            a = model.forward_heads(shared, shared)
            b = model.forward_heads(cut, cut)
        assert not torch.equal(a.category_logits, b.category_logits)
        assert not torch.equal(a.color_logits, b.color_logits)

    def test_pa_requires_labels(self, tiny_model, vocabulary):
        """Test that forward_heads on a PA variant needs object labels."""
        model = tiny_model("pa-sce", vocabulary)
        features = StreamFeatures(torch.rand(2, 32), "object")
        with pytest.raises(ModelError):
            model.forward_heads(features, features)
        outputs = model.forward_heads(features, features, torch.tensor([1, 2]))
        assert outputs.color_logits.shape == (2, 4)

    def test_pa_labels_change_attributes(self, tiny_model, vocabulary):
        """Test that the embedded object label conditions the attribute logits."""
        model = tiny_model("pa-sce", vocabulary)
        with torch.no_grad():
            model.attribute_head.color.weight.normal_()
        first = head_outputs(model, labels=torch.tensor([1, 1]))
        second = head_outputs(model, labels=torch.tensor([2, 2]))
        assert torch.equal(first.category_logits, second.category_logits)
        assert not torch.equal(first.color_logits, second.color_logits)


class TestAttributeHead:
    """Test the attribute head on its own."""

    def test_cross_link_needs_cross_features(self):
        """Test that a cross-linked head refuses a missing link input."""
        head = AttributeHead(8, 3, 2, cross_dim=8)
        with pytest.raises(ModelError):
            head(torch.rand(1, 8))

    def test_unified_material_only_link_rejected(self):
        """Test that the unified head links both attributes or none."""
        with pytest.raises(ModelError):
            AttributeHead(
                8, 3, 2, unified=True, cross_dim=8, cross_link_targets="material"
            )

    def test_no_materials(self):
        """Test that a vocabulary without materials gives empty material logits."""
        color, material, unified = AttributeHead(8, 3, 0)(torch.rand(5, 8))
        assert color.shape == (5, 3)
        assert material.shape == (5, 0)
        assert unified is None


class TestPredict:
    """Test inference."""

    def test_images_to_tensor_pads(self):
        """Test normalisation and padding to a multiple of 32."""
        image = np.full((40, 50, 3), 255, dtype=np.uint8)
        batch, sizes = images_to_tensor(
            [image], torch.full((3,), 0.5), torch.full((3,), 0.25)
        )
        assert batch.shape == (1, 3, 64, 64)
        assert sizes == [(40, 50)]
        assert torch.allclose(batch[0, :, :40, :50], torch.full((3, 40, 50), 2.0))
        assert batch[0, :, 40:, :].abs().sum() == 0

    def test_predictions_valid(self, tiny_model, vocabulary, tiny_dataset):
        """Test detection structure and score order on synthetic images."""
        model = tiny_model("two-stream-cross-link", vocabulary).train()
        images = [s.load_image() for s in tiny_dataset.samples[:2]]
        results = predict(model, images, score_threshold=0.0)
        assert model.training
        assert len(results) == 2
        for detections in results:
            assert len(detections) <= TINY_DETECTOR.detections_per_image
            scores = [d.score for d in detections]
            assert scores == sorted(scores, reverse=True)
            for det in detections:
                assert 0 <= det.box.x1 < det.box.x2 <= 64
                assert 0 <= det.label < 3
                assert det.category_scores.shape == (4,)
                assert det.color_scores.sum() == pytest.approx(1.0, abs=1e-5)
                assert det.material is not None

    def test_detection_only_predictions_have_no_attributes(self, tiny_model, vocabulary):
        """Test that detection-only detections carry no attribute scores."""
        model = tiny_model("ss-detection-only", vocabulary)
        (detections,) = predict(model, [blank_image()], score_threshold=0.0)
        for det in detections:
            assert det.color is None and det.material is None

    def test_eval_mode_model_left_untouched(self, tiny_model, vocabulary):
        """Test that predicting with an evaluation-mode model never switches modes."""
        model = tiny_model("two-stream", vocabulary).eval()
        with patch.object(model, "train", wraps=model.train) as train_spy:
            predict(model, [blank_image()], score_threshold=0.0)
        train_spy.assert_not_called()
        assert not model.training

    def test_concurrent_calls_match_sequential(self, tiny_model, vocabulary, tiny_dataset):
        """Test threads sharing an evaluation-mode model."""
        model = tiny_model("pa-sce", vocabulary).eval()
        images = [s.load_image() for s in tiny_dataset.samples]
        expected = [predict(model, [image], score_threshold=0.0) for image in images]
        with ThreadPoolExecutor(max_workers=4) as pool:
            got = list(
                pool.map(lambda image: predict(model, [image], score_threshold=0.0), images)
            )
        for want, have in zip(expected, got):
            assert [d.box for d in have[0]] == [d.box for d in want[0]]
            assert [d.label for d in have[0]] == [d.label for d in want[0]]

    def test_empty_input(self, tiny_model, vocabulary):
        """Test that no images give no results."""
        assert predict(tiny_model("pa-uce", vocabulary), []) == []

    def test_high_threshold_drops_everything(self, tiny_model, vocabulary):
        """Test that a threshold above 1 keeps nothing."""
        model = tiny_model("pa-sce", vocabulary)
        assert predict(model, [blank_image()], score_threshold=1.1) == [[]]


class TestCheckpoint:
    """Test saving and loading checkpoints."""

    def test_round_trip(self, tiny_model, vocabulary):
        """Test that a loaded checkpoint reproduces the outputs."""
        model = tiny_model("pa-uce", vocabulary)
        model.set_pixel_stats([0.4, 0.5, 0.6], [0.2, 0.3, 0.25])
        with tempfile.TemporaryDirectory() as temp_dir:
            path = save_checkpoint(model, checkpoint_path(Path(temp_dir), 7), step=7)
            assert path.name == "step_7.ckpt"
            loaded, metadata = load_checkpoint(path)
        assert metadata["step"] == 7
        assert metadata["variant"] == "pa-uce"
        assert loaded.vocabulary == vocabulary
        assert not loaded.training
        assert torch.equal(loaded.pixel_mean, model.pixel_mean)
        a = head_outputs(model)
        b = head_outputs(loaded)
        assert torch.equal(a.attribute_logits, b.attribute_logits)

    def test_missing_checkpoint(self):
        """Test that a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint(Path("nonexistent.ckpt"))

    def test_corrupt_checkpoint(self):
        """Test that an unreadable file raises ModelError."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "bad.ckpt"
            path.write_bytes(b"not a checkpoint")
            with pytest.raises(ModelError):
                load_checkpoint(path)

    def test_invalid_pixel_stats(self, tiny_model, vocabulary):
        """Test that pixel statistics need positive standard deviations."""
        model = tiny_model("single-stream", vocabulary)
        with pytest.raises(ModelError):
            model.set_pixel_stats([0.5, 0.5, 0.5], [0.2, 0.0, 0.2])
