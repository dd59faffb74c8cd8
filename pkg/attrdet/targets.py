"""Anchor and proposal matching, sampling and training-target assignment."""

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch

from .datamodel import DetectionSample
from .errors import GeometryError
from .geometry import box_iou, encode_boxes

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1
MISSING = -1


@dataclass(frozen=True)
class AnchorMatchConfig:
    negative_threshold: float = 0.3
    positive_threshold: float = 0.7
    batch_size: int = 256
    positive_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not 0 <= self.negative_threshold < self.positive_threshold <= 1:
            raise GeometryError(
                "anchor thresholds need 0 <= negative < positive <= 1, got "
                f"{self.negative_threshold} and {self.positive_threshold}"
            )
        if self.batch_size < 1 or not 0 < self.positive_fraction <= 1:
            raise GeometryError("invalid anchor sampling settings")


@dataclass(frozen=True)
class RoIMatchConfig:
    foreground_threshold: float = 0.5
    batch_size: int = 128
    foreground_fraction: float = 0.25

    def __post_init__(self) -> None:
        if not 0 < self.foreground_threshold < 1:
            raise GeometryError("foreground threshold must lie in (0, 1)")
        if self.batch_size < 1 or not 0 < self.foreground_fraction <= 1:
            raise GeometryError("invalid RoI sampling settings")


@dataclass
class GroundTruth:
    """Annotations of one image as tensors.

    ``categories`` are foreground indices starting at 0. Missing color or material
    labels are ``-1``.
    """

    boxes: torch.Tensor
    categories: torch.Tensor
    colors: torch.Tensor
    materials: torch.Tensor

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    @classmethod
    def from_sample(cls, sample: DetectionSample, flip: bool = False) -> "GroundTruth":
        """Build from a sample; ``flip`` mirrors boxes horizontally."""
        boxes = torch.tensor(
            [ann.box.as_list() for ann in sample.annotations], dtype=torch.float32
        ).reshape(-1, 4)
        if flip:
            boxes = torch.stack(
                (
                    sample.width - boxes[:, 2],
                    boxes[:, 1],
                    sample.width - boxes[:, 0],
                    boxes[:, 3],
                ),
                dim=1,
            )

        def labels(values: list) -> torch.Tensor:
            return torch.tensor(
                [MISSING if v is None else v for v in values], dtype=torch.long
            )

        return cls(
            boxes=boxes,
            categories=labels([ann.category for ann in sample.annotations]),
            colors=labels([ann.color for ann in sample.annotations]),
            materials=labels([ann.material for ann in sample.annotations]),
        )

    def to(self, device: torch.device) -> "GroundTruth":
        return GroundTruth(
            self.boxes.to(device),
            self.categories.to(device),
            self.colors.to(device),
            self.materials.to(device),
        )


@dataclass
class AnchorTargets:
    """Per-anchor labels (``1``, ``0`` or ``-1``), regression targets and sample mask.

    Sampling never changes ``labels``; it only selects which anchors reach the loss.
    """

    labels: torch.Tensor
    deltas: torch.Tensor
    sampled: torch.Tensor

    @property
    def sampled_positive(self) -> torch.Tensor:
        return self.sampled & (self.labels == POSITIVE)


@dataclass
class RoITargets:
    """Targets for the sampled RoIs of one image.

    Attributes:
        indices: Row of each sampled RoI in the proposal tensor, ascending
        boxes: ``(R, 4)`` sampled RoI boxes
        labels: Category label per RoI, background ``0`` and foreground ``c + 1``
        deltas: ``(R, 4)`` regression targets, zero for background
        colors: Color label or ``-1``
        materials: Material label or ``-1``
        color_mask: Foreground RoIs whose matched annotation has a color
        material_mask: Foreground RoIs whose matched annotation has a material
    """

    indices: torch.Tensor
    boxes: torch.Tensor
    labels: torch.Tensor
    deltas: torch.Tensor
    colors: torch.Tensor
    materials: torch.Tensor
    color_mask: torch.Tensor
    material_mask: torch.Tensor

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def foreground(self) -> torch.Tensor:
        return self.labels > 0

    @classmethod
    def cat(cls, targets: Sequence["RoITargets"]) -> "RoITargets":
        """Concatenate per-image targets in batch order; ``indices`` stay per image."""
        return cls(
            *(
                torch.cat([getattr(t, f.name) for t in targets])
                for f in fields(cls)
            )
        )


def _subsample(
    positive: torch.Tensor,
    negative: torch.Tensor,
    batch_size: int,
    positive_fraction: float,
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    """Random subset mask with at most ``batch_size * positive_fraction`` positives."""
    pos = torch.nonzero(positive).flatten()
    neg = torch.nonzero(negative).flatten()
    num_pos = min(len(pos), int(batch_size * positive_fraction))
    num_neg = min(len(neg), batch_size - num_pos)
    pos = pos[torch.randperm(len(pos), generator=generator)[:num_pos].to(pos.device)]
    neg = neg[torch.randperm(len(neg), generator=generator)[:num_neg].to(neg.device)]
    mask = torch.zeros_like(positive)
    mask[pos] = True
    mask[neg] = True
    return mask


def assign_anchor_targets(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    config: AnchorMatchConfig = AnchorMatchConfig(),
    generator: Optional[torch.Generator] = None,
) -> AnchorTargets:
    """Label anchors against ground truth and sample a minibatch.

    An anchor is positive when its IoU with some box reaches
    ``positive_threshold`` or it is a highest-IoU anchor of some box (ties
    included, IoU above zero), negative when its best IoU is below
    ``negative_threshold``, and ignored otherwise.

    Args:
        anchors: ``(A, 4)`` anchors
        gt_boxes: ``(G, 4)`` ground-truth boxes, possibly empty
        config: Thresholds and sampling sizes
        generator: Random source of the subsampling

    Returns:
        Labels, regression targets for positives and the sampled mask
    """
    num_anchors = anchors.shape[0]
    labels = torch.full((num_anchors,), IGNORE, dtype=torch.long, device=anchors.device)
    deltas = torch.zeros_like(anchors)
    if gt_boxes.shape[0] == 0:
        labels[:] = NEGATIVE
    else:
        overlaps = box_iou(anchors, gt_boxes)
        best_iou, matched = overlaps.max(dim=1)
        labels[best_iou < config.negative_threshold] = NEGATIVE
        labels[best_iou >= config.positive_threshold] = POSITIVE
        best_per_gt = overlaps.max(dim=0).values
        is_best = (overlaps == best_per_gt[None]) & (best_per_gt[None] > 0)
        labels[is_best.any(dim=1)] = POSITIVE
        positive = labels == POSITIVE
        deltas[positive] = encode_boxes(gt_boxes[matched[positive]], anchors[positive])

    sampled = _subsample(
        labels == POSITIVE,
        labels == NEGATIVE,
        config.batch_size,
        config.positive_fraction,
        generator,
    )
    return AnchorTargets(labels, deltas, sampled)


def append_ground_truth(proposals: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Proposals followed by the ground-truth boxes, without gradient."""
    return torch.cat([proposals.detach(), gt_boxes.to(proposals)])


def assign_roi_targets(
    proposals: torch.Tensor,
    gt: GroundTruth,
    config: RoIMatchConfig = RoIMatchConfig(),
    generator: Optional[torch.Generator] = None,
) -> RoITargets:
    """Match proposals to annotations and sample a RoI minibatch.

    A proposal takes the category of its highest-IoU annotation when that IoU
    reaches ``foreground_threshold`` and is background otherwise. Color and
    material targets are copied only from annotations that carry them.

    Args:
        proposals: ``(P, 4)`` boxes, ground truth already appended in training
        gt: Annotations of the image
        config: Threshold and sampling sizes
        generator: Random source of the subsampling

    Returns:
        Targets for the sampled proposals in ascending proposal order
    """
    proposals = proposals.detach()
    count = proposals.shape[0]
    device = proposals.device
    gt = gt.to(device)
    if len(gt) == 0:
        foreground = torch.zeros(count, dtype=torch.bool, device=device)
        matched = torch.zeros(count, dtype=torch.long, device=device)
    else:
        best_iou, matched = box_iou(proposals, gt.boxes).max(dim=1)
        foreground = best_iou >= config.foreground_threshold

    sampled = _subsample(
        foreground,
        ~foreground,
        config.batch_size,
        config.foreground_fraction,
        generator,
    )
    indices = torch.nonzero(sampled).flatten()
    boxes = proposals[indices]
    fg = foreground[indices]
    labels = torch.zeros(len(indices), dtype=torch.long, device=device)
    deltas = torch.zeros((len(indices), 4), device=device)
    colors = torch.full((len(indices),), MISSING, dtype=torch.long, device=device)
    materials = colors.clone()
    if len(gt):
        match = matched[indices]
        labels[fg] = gt.categories[match[fg]] + 1
        deltas[fg] = encode_boxes(gt.boxes[match[fg]], boxes[fg])
        colors[fg] = gt.colors[match[fg]]
        materials[fg] = gt.materials[match[fg]]
    return RoITargets(
        indices=indices,
        boxes=boxes,
        labels=labels,
        deltas=deltas,
        colors=colors,
        materials=materials,
        color_mask=fg & (colors != MISSING),
        material_mask=fg & (materials != MISSING),
    )
