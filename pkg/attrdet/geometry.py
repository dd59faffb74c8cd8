"""Axis-aligned box arithmetic shared by anchors, proposals, targets and evaluation.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with ``(x1, y1)`` the
top-left corner. Box deltas follow the Fast R-CNN parameterisation::

    dx = (cx - cx_a) / w_a      dw = log(w / w_a)
    dy = (cy - cy_a) / h_a      dh = log(h / h_a)

Every function comes in a scalar form working on :class:`Box` values and a tensor
form working on ``(N, 4)`` tensors; the tensor forms are what the model uses.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torchvision import ops

from .errors import GeometryError

# log(1000 / 16): widest ratio a delta may scale an anchor by.
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"box has non-finite coordinates: {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise GeometryError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clip(self, width: float, height: float) -> "Box":
        """Return the box clipped to ``[0, width] x [0, height]``.

        Raises:
            GeometryError: If nothing of the box lies inside the image
        """
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise GeometryError(f"a box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class BoxDelta:
    """Parameterised offset of a box relative to a reference box."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise GeometryError(f"delta has non-finite values: {self}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        A value in ``[0, 1]``; symmetric in its arguments

    Raises:
        GeometryError: If either box has zero area
    """
    if a.area <= 0 or b.area <= 0:
        raise GeometryError("iou is undefined for zero-area boxes")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def encode(gt: Box, anchor: Box) -> BoxDelta:
    """Encode ``gt`` as a delta relative to ``anchor``."""
    gx, gy = gt.center
    ax, ay = anchor.center
    return BoxDelta(
        dx=(gx - ax) / anchor.width,
        dy=(gy - ay) / anchor.height,
        dw=math.log(gt.width / anchor.width),
        dh=math.log(gt.height / anchor.height),
    )


def decode(delta: BoxDelta, anchor: Box, clamp: float = DELTA_CLAMP) -> Box:
    """Apply ``delta`` to ``anchor``; inverse of :func:`encode`.

    ``dw`` and ``dh`` are clamped to ``clamp`` before exponentiation.
    """
    ax, ay = anchor.center
    cx = delta.dx * anchor.width + ax
    cy = delta.dy * anchor.height + ay
    w = math.exp(min(delta.dw, clamp)) * anchor.width
    h = math.exp(min(delta.dh, clamp)) * anchor.height
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def nms(boxes: Sequence[Tuple[Box, float]], iou_threshold: float) -> List[int]:
    """Greedy non-maximum suppression over ``(box, score)`` pairs.

    Args:
        boxes: Candidate boxes with their scores
        iou_threshold: Boxes overlapping a kept box by more than this are dropped

    Returns:
        Kept input indices, by descending score; equal scores keep the lower index
        first

    Raises:
        GeometryError: If a score is not finite
    """
    if not boxes:
        return []
    if not all(math.isfinite(score) for _, score in boxes):
        raise GeometryError("nms scores must be finite")
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i][1])
    keep: List[int] = []
    for i in order:
        if all(iou(boxes[i][0], boxes[k][0]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


# Tensor forms


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes, shape ``(N, M)``."""
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)
    lt = torch.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return inter / union.clamp(min=torch.finfo(boxes1.dtype).tiny)


def encode_boxes(gt: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Row-wise :func:`encode` for ``(N, 4)`` tensors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack(
        ((gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)),
        dim=1,
    )


def decode_boxes(
    deltas: torch.Tensor, anchors: torch.Tensor, clamp: float = DELTA_CLAMP
) -> torch.Tensor:
    """Row-wise :func:`decode`.

    Args:
        deltas: ``(N, 4)`` or ``(N, K, 4)`` deltas
        anchors: ``(N, 4)`` reference boxes
        clamp: Upper bound applied to ``dw`` and ``dh``

    Returns:
        Boxes with the shape of ``deltas``
    """
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    if deltas.dim() == 3:
        aw, ah, ax, ay = aw[:, None], ah[:, None], ax[:, None], ay[:, None]
    cx = deltas[..., 0] * aw + ax
    cy = deltas[..., 1] * ah + ay
    w = torch.exp(deltas[..., 2].clamp(max=clamp)) * aw
    h = torch.exp(deltas[..., 3].clamp(max=clamp)) * ah
    return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=-1)


def clip_boxes(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(min=0, max=width)
    y = boxes[..., 1::2].clamp(min=0, max=height)
    return torch.stack((x[..., 0], y[..., 0], x[..., 1], y[..., 1]), dim=-1)


def nonempty(boxes: torch.Tensor, min_size: float = 1e-2) -> torch.Tensor:
    """Mask of boxes whose sides are both at least ``min_size``."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return (w >= min_size) & (h >= min_size)


def batched_nms(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    groups: torch.Tensor,
    iou_threshold: float,
) -> torch.Tensor:
    """NMS applied independently within each group id, merged by descending score."""
    return ops.batched_nms(boxes, scores, groups, iou_threshold)
