"""Variant wiring, preprocessing and inference for the joint detector."""

import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..datamodel import Detection, Vocabulary
from ..errors import ModelError
from ..geometry import Box, batched_nms, clip_boxes, decode_boxes, nonempty
from .backbone import BackboneConfig, ResNetFPN
from .heads import AttributeHead, HeadOutputs, LabelEmbedding, ObjectHead
from .roi import RoIFeatureExtractor, StreamFeatures
from .rpn import AnchorConfig, Proposals, RegionProposalNetwork, RPNConfig, RPNOutput

SIZE_DIVISIBLE = 32


class ModelVariant(str, Enum):
    """The seven stream wirings."""

    SINGLE_STREAM = "single-stream"
    DETECTION_ONLY = "single-stream-detection-only"
    PA_SCE = "pa-sce"
    PA_UCE = "pa-uce"
    TWO_STREAM = "two-stream"
    TWO_STREAM_CROSS_LINK = "two-stream-cross-link"
    TWO_STREAM_LFE = "two-stream-lfe"

    @classmethod
    def parse(cls, name: "str | ModelVariant") -> "ModelVariant":
        """Resolve a variant from a loose spelling.

        Case, punctuation and ``+`` are ignored and ``ss``/``ts`` expand to
        ``singlestream``/``twostream``, so ``TwoStream+CrossLink``,
        ``two_stream_cross_link`` and ``ts-cross-link`` all resolve.

        Raises:
            ModelError: If the name matches no variant
        """
        if isinstance(name, cls):
            return name
        key = re.sub(r"[^a-z0-9]", "", str(name).lower())
        for prefix, full in (("ss", "singlestream"), ("ts", "twostream")):
            if key.startswith(prefix) and not key.startswith(full):
                key = full + key[len(prefix) :]
        for variant in cls:
            if key == variant.value.replace("-", ""):
                return variant
        valid = ", ".join(v.value for v in cls)
        raise ModelError(f"unknown variant {name!r}; valid variants: {valid}")

    @property
    def is_two_stream(self) -> bool:
        return self.value.startswith("two-stream")

    @property
    def has_attributes(self) -> bool:
        return self is not ModelVariant.DETECTION_ONLY

    @property
    def uses_label_embedding(self) -> bool:
        return self in (ModelVariant.PA_SCE, ModelVariant.PA_UCE)

    @property
    def attribute_loss(self) -> Optional[str]:
        """``"uce"``, ``"sce"`` or ``None`` for detection only."""
        if not self.has_attributes:
            return None
        return "uce" if self is ModelVariant.PA_UCE else "sce"

    @property
    def cross_link(self) -> bool:
        return self is ModelVariant.TWO_STREAM_CROSS_LINK

    @property
    def late_fusion(self) -> bool:
        return self is ModelVariant.TWO_STREAM_LFE


@dataclass(frozen=True)
class DetectorConfig:
    """Everything above the backbone.

    Attributes:
        anchor: Anchor scales and ratios
        rpn: Proposal filtering limits
        representation_size: RoI feature dimension of every stream
        roi_output_size: RoI pooling bins per side
        roi_sampling_ratio: Bilinear samples per bin and axis
        canonical_size: Box side assigned to ``canonical_level``
        canonical_level: Pyramid level of a ``canonical_size`` box
        embedding_dim: Label embedding width for the PA variants
        cross_link_targets: ``"both"`` or ``"material"``
        score_threshold: Minimum class probability kept by ``predict``
        nms_threshold: Per-class NMS IoU threshold in ``predict``
        detections_per_image: Cap on detections per image
        min_box_size: Minimum side of a kept detection, in pixels
    """

    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    representation_size: int = 256
    roi_output_size: int = 7
    roi_sampling_ratio: int = 2
    canonical_size: float = 56.0
    canonical_level: int = 4
    embedding_dim: int = 64
    cross_link_targets: str = "both"
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    detections_per_image: int = 100
    min_box_size: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DetectorConfig":
        values = dict(data)
        anchor = values.pop("anchor", {})
        rpn = values.pop("rpn", {})
        try:
            return cls(
                anchor=AnchorConfig(**{k: tuple(v) for k, v in anchor.items()}),
                rpn=RPNConfig(**rpn),
                **values,
            )
        except TypeError as e:
            raise ModelError(f"invalid detector config ({e})") from e


def images_to_tensor(
    images: Sequence[np.ndarray],
    mean: torch.Tensor,
    std: torch.Tensor,
    size_divisible: int = SIZE_DIVISIBLE,
) -> Tuple[torch.Tensor, List[Tuple[int, int]]]:
    """Normalize ``H x W x 3`` uint8 images and zero-pad them into one batch.

    Returns:
        ``(N, 3, H, W)`` batch with sides rounded up to ``size_divisible`` and the
        original ``(height, width)`` of every image
    """
    sizes = [(int(img.shape[0]), int(img.shape[1])) for img in images]
    height = -(-max(h for h, _ in sizes) // size_divisible) * size_divisible
    width = -(-max(w for _, w in sizes) // size_divisible) * size_divisible
    batch = torch.zeros((len(images), 3, height, width), device=mean.device)
    for i, img in enumerate(images):
        t = torch.from_numpy(np.ascontiguousarray(img)).to(mean.device)
        t = t.permute(2, 0, 1).float() / 255.0
        batch[i, :, : t.shape[1], : t.shape[2]] = (t - mean[:, None, None]) / std[
            :, None, None
        ]
    return batch, sizes


class Detector(nn.Module):
    """Two-stage detector with color and material heads.

    The object stream owns the RPN. Two-stream variants add an independent
    attribute backbone and RoI extractor that share only the proposal boxes.
    """

    def __init__(
        self,
        variant: ModelVariant,
        vocabulary: Vocabulary,
        backbone_config: BackboneConfig,
        config: DetectorConfig,
    ) -> None:
        super().__init__()
        self.variant = variant
        self.vocabulary = vocabulary
        self.backbone_config = backbone_config
        self.config = config

        channels = backbone_config.fpn_channels
        levels = backbone_config.pyramid_levels
        dim = config.representation_size

        def roi_extractor(stream: str) -> RoIFeatureExtractor:
            return RoIFeatureExtractor(
                channels,
                levels,
                stream,
                dim,
                config.roi_output_size,
                config.roi_sampling_ratio,
                config.canonical_size,
                config.canonical_level,
            )

        self.object_backbone = ResNetFPN(backbone_config)
        self.rpn = RegionProposalNetwork(channels, levels, config.anchor, config.rpn)
        self.object_roi = roi_extractor("object")
        self.attribute_backbone: Optional[ResNetFPN] = None
        self.attribute_roi: Optional[RoIFeatureExtractor] = None
        if variant.is_two_stream:
            self.attribute_backbone = ResNetFPN(backbone_config)
            self.attribute_roi = roi_extractor("attribute")

        head_dim = 2 * dim if variant.late_fusion else dim
        self.object_head = ObjectHead(head_dim, len(vocabulary.categories))
        self.label_embedding: Optional[LabelEmbedding] = None
        if variant.uses_label_embedding:
            self.label_embedding = LabelEmbedding(
                len(vocabulary.categories), dim, config.embedding_dim
            )
        self.attribute_head: Optional[AttributeHead] = None
        if variant.has_attributes:
            self.attribute_head = AttributeHead(
                head_dim,
                len(vocabulary.colors),
                len(vocabulary.materials),
                unified=variant.attribute_loss == "uce",
                cross_dim=dim if variant.cross_link else 0,
                cross_link_targets=config.cross_link_targets,
            )

        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.25))

    def set_pixel_stats(self, mean: Sequence[float], std: Sequence[float]) -> None:
        """Per-channel statistics in ``[0, 1]`` units."""
        if len(mean) != 3 or len(std) != 3 or min(std) <= 0:
            raise ModelError("pixel statistics need 3 means and 3 positive stds")
        self.pixel_mean.copy_(torch.tensor(mean, dtype=torch.float32))
        self.pixel_std.copy_(torch.tensor(std, dtype=torch.float32))

    def preprocess(
        self, images: Sequence[np.ndarray]
    ) -> Tuple[torch.Tensor, List[Tuple[int, int]]]:
        return images_to_tensor(images, self.pixel_mean, self.pixel_std)

    def backbone_features(
        self, batch: torch.Tensor
    ) -> Tuple[List[torch.Tensor], Optional[List[torch.Tensor]]]:
        """Pyramid maps of the object stream and, for two streams, the attribute stream."""
        object_maps = self.object_backbone(batch)
        attribute_maps = None
        if self.attribute_backbone is not None:
            attribute_maps = self.attribute_backbone(batch)
        return object_maps, attribute_maps

    def forward_rpn(
        self,
        batch: torch.Tensor,
        image_sizes: Sequence[Tuple[int, int]],
        features: Optional[List[torch.Tensor]] = None,
    ) -> Tuple[List[Proposals], RPNOutput]:
        if features is None:
            features = self.object_backbone(batch)
        return self.rpn(features, image_sizes)

    def extract_roi_features(
        self, stream: str, features: Sequence[torch.Tensor], boxes: List[torch.Tensor]
    ) -> StreamFeatures:
        if stream == "object":
            return self.object_roi(features, boxes)
        if stream == "attribute" and self.attribute_roi is not None:
            return self.attribute_roi(features, boxes)
        raise ModelError(f"{self.variant.value} has no {stream} stream")

    def forward_heads(
        self,
        object_features: StreamFeatures,
        attribute_features: StreamFeatures,
        predicted_category: Optional[torch.Tensor] = None,
    ) -> HeadOutputs:
        """Run the prediction heads on per-RoI features.

        Single-stream variants pass the same features twice. ``predicted_category``
        is the label fed to the PA embedding: ground truth while training, the
        argmax prediction at inference.

        Raises:
            ModelError: If a PA variant is called without ``predicted_category``
        """
        obj = object_features.features
        attr = attribute_features.features
        if self.variant.late_fusion:
            obj = attr = torch.cat([obj, attr], dim=1)
        category_logits, box_deltas = self.object_head(obj)
        if self.attribute_head is None:
            return HeadOutputs(category_logits, box_deltas)

        if self.label_embedding is not None:
            if predicted_category is None:
                raise ModelError(f"{self.variant.value} needs object labels")
            attr = self.label_embedding(attr, predicted_category)
        cross = object_features.features.detach() if self.variant.cross_link else None
        color, material, unified = self.attribute_head(attr, cross)
        return HeadOutputs(category_logits, box_deltas, color, material, unified)

    def classify(
        self,
        object_maps: Sequence[torch.Tensor],
        attribute_maps: Optional[Sequence[torch.Tensor]],
        boxes: List[torch.Tensor],
        category_labels: Optional[torch.Tensor] = None,
    ) -> HeadOutputs:
        """RoI extraction plus heads for boxes given per image.

        Without ``category_labels`` the PA embedding is fed the argmax category.
        """
        obj = self.extract_roi_features("object", object_maps, boxes)
        attr = obj
        if attribute_maps is not None:
            attr = self.extract_roi_features("attribute", attribute_maps, boxes)
        if self.label_embedding is not None and category_labels is None:
            fused = obj.features
            if self.variant.late_fusion:
                fused = torch.cat([obj.features, attr.features], dim=1)
            category_labels = self.object_head(fused)[0].argmax(dim=1)
        return self.forward_heads(obj, attr, category_labels)

    def stream_parameters(self, stream: str) -> Iterator[Tuple[str, nn.Parameter]]:
        """Named parameters belonging to the ``object`` or ``attribute`` stream."""
        prefixes = {
            "object": ("object_backbone.", "rpn.", "object_roi.", "object_head."),
            "attribute": (
                "attribute_backbone.",
                "attribute_roi.",
                "label_embedding.",
                "attribute_head.",
            ),
        }
        if stream not in prefixes:
            raise ModelError(f"unknown stream {stream!r}")
        for name, param in self.named_parameters():
            if name.startswith(prefixes[stream]):
                yield name, param

    def parameter_report(self) -> Dict[str, int]:
        """Parameter count per top-level component, plus ``total``."""
        report = {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.named_children()
        }
        report["total"] = sum(p.numel() for p in self.parameters())
        return report


def build_model(
    variant: "ModelVariant | str",
    vocabulary: Vocabulary,
    backbone_config: Optional[BackboneConfig] = None,
    config: Optional[DetectorConfig] = None,
) -> Detector:
    """Build a detector for one of the seven variants.

    Args:
        variant: Variant or its name
        vocabulary: Categories, colors and materials the heads predict
        backbone_config: Backbone layout, desk-scale default when omitted
        config: Head and inference settings

    Returns:
        An initialised :class:`Detector` in training mode

    Raises:
        ModelError: If the variant is unknown or the configs are inconsistent
    """
    return Detector(
        ModelVariant.parse(variant),
        vocabulary,
        backbone_config or BackboneConfig(),
        config or DetectorConfig(),
    )


def slice_outputs(outputs: HeadOutputs, start: int, end: int) -> HeadOutputs:
    """Rows ``start:end`` of every head output, moved to the CPU."""

    def cut(t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        return None if t is None else t[start:end].cpu()

    return HeadOutputs(
        outputs.category_logits[start:end].cpu(),
        outputs.box_deltas[start:end].cpu(),
        cut(outputs.color_logits),
        cut(outputs.material_logits),
        cut(outputs.attribute_logits),
    )


def _postprocess(
    model: Detector,
    outputs: HeadOutputs,
    boxes: torch.Tensor,
    objectness: torch.Tensor,
    image_size: Tuple[int, int],
    score_threshold: float,
) -> List[Detection]:
    config = model.config
    num_categories = len(model.vocabulary.categories)
    probs = F.softmax(outputs.category_logits, dim=1)
    decoded = clip_boxes(decode_boxes(outputs.box_deltas, boxes), *image_size)

    # One candidate per (RoI, foreground class).
    rows = torch.arange(len(boxes)).repeat_interleave(num_categories)
    classes = torch.arange(num_categories).repeat(len(boxes))
    candidates = decoded.reshape(-1, 4)
    scores = probs[:, 1:].reshape(-1)
    keep = (scores >= score_threshold) & nonempty(candidates, config.min_box_size)
    rows, classes, candidates, scores = (
        rows[keep],
        classes[keep],
        candidates[keep],
        scores[keep],
    )
    keep = batched_nms(candidates, scores, classes, config.nms_threshold)
    keep = keep[: config.detections_per_image]

    color_probs = material_probs = None
    if outputs.color_logits is not None and outputs.material_logits is not None:
        color_probs = F.softmax(outputs.color_logits, dim=1).numpy()
        material_probs = F.softmax(outputs.material_logits, dim=1).numpy()
    category_probs = probs.numpy()

    detections = []
    for i in keep.tolist():
        row = int(rows[i])
        detections.append(
            Detection(
                box=Box(*map(float, candidates[i].tolist())),
                label=int(classes[i]),
                score=float(scores[i]),
                category_scores=category_probs[row],
                color_scores=None if color_probs is None else color_probs[row],
                material_scores=None if material_probs is None else material_probs[row],
                objectness=float(objectness[row]),
            )
        )
    return detections


def predict(
    model: Detector,
    images: Sequence[np.ndarray],
    score_threshold: Optional[float] = None,
) -> List[List[Detection]]:
    """Detect objects and recognise their attributes.

    A model in training mode is switched to evaluation mode for the call and
    back afterwards. A model already in evaluation mode is only read, so
    concurrent calls need one.

    Args:
        model: Trained or freshly built detector
        images: ``H x W x 3`` uint8 arrays
        score_threshold: Minimum class probability, ``config.score_threshold`` if None

    Returns:
        Detections per image sorted by descending score, background removed
    """
    if not images:
        return []
    threshold = (
        model.config.score_threshold if score_threshold is None else score_threshold
    )
    was_training = model.training
    if was_training:
        model.eval()
    try:
        with torch.no_grad():
            batch, sizes = model.preprocess(images)
            object_maps, attribute_maps = model.backbone_features(batch)
            proposals, _ = model.forward_rpn(batch, sizes, object_maps)
            boxes = [p.boxes for p in proposals]
            outputs = model.classify(object_maps, attribute_maps, boxes)
    finally:
        if was_training:
            model.train()

    results = []
    start = 0
    for props, size in zip(proposals, sizes):
        end = start + len(props)
        image_outputs = slice_outputs(outputs, start, end)
        results.append(
            _postprocess(
                model,
                image_outputs,
                props.boxes.cpu(),
                props.objectness.cpu(),
                size,
                threshold,
            )
        )
        start = end
    return results
