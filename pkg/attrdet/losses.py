"""Training objectives: RPN, detection and attribute losses.

Every term is a mean over the rows that reach it. A term whose mask selects no
rows is an exact zero that stays connected to the graph.
"""

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import LossError, TrainingError
from .model.heads import HeadOutputs
from .model.rpn import RPNOutput
from .targets import POSITIVE, AnchorTargets, RoITargets

RPN_SMOOTH_L1_BETA = 1.0 / 9.0
DETECTION_SMOOTH_L1_BETA = 1.0


@dataclass
class LossBreakdown:
    """Loss components of one step.

    ``color``, ``material`` and ``attr`` are ``None`` for detection-only models;
    for the unified loss ``color`` and ``material`` are ``None`` and ``attr`` holds
    the single value.
    """

    rpn_objectness: torch.Tensor
    rpn_box: torch.Tensor
    cls: torch.Tensor
    loc: torch.Tensor
    color: Optional[torch.Tensor] = None
    material: Optional[torch.Tensor] = None
    attr: Optional[torch.Tensor] = None

    @property
    def total(self) -> torch.Tensor:
        total = self.rpn_objectness + self.rpn_box + self.cls + self.loc
        if self.attr is not None:
            total = total + self.attr
        return total

    def as_dict(self) -> Dict[str, float]:
        """Float value per present component plus ``total``."""
        values = {
            f.name: float(getattr(self, f.name))
            for f in fields(self)
            if getattr(self, f.name) is not None
        }
        values["total"] = float(self.total)
        return values

    def check_finite(self, step: int) -> None:
        """Raise :class:`TrainingError` naming the first non-finite component."""
        for name, value in self.as_dict().items():
            if not math.isfinite(value):
                raise TrainingError(f"{name} loss is {value}", step=step, component=name)


def _zero(logits: torch.Tensor) -> torch.Tensor:
    return logits.sum() * 0.0


def masked_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean softmax cross-entropy over the rows selected by ``mask``.

    Raises:
        LossError: If a selected label lies outside ``[0, logits.shape[1])``
    """
    if not bool(mask.any()):
        return _zero(logits)
    selected = labels[mask]
    if bool((selected < 0).any()) or bool((selected >= logits.shape[1]).any()):
        raise LossError(
            f"label out of range for {logits.shape[1]} classes: "
            f"{sorted(set(selected.tolist()))}"
        )
    return F.cross_entropy(logits[mask], selected)


def sce_attribute_loss(
    color_logits: torch.Tensor,
    colors: torch.Tensor,
    color_mask: torch.Tensor,
    material_logits: torch.Tensor,
    materials: torch.Tensor,
    material_mask: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Separate color and material cross-entropies; their sum is the attribute loss."""
    return (
        masked_cross_entropy(color_logits, colors, color_mask),
        masked_cross_entropy(material_logits, materials, material_mask),
    )


def build_uce_rows(
    attribute_logits: torch.Tensor,
    colors: torch.Tensor,
    color_mask: torch.Tensor,
    materials: torch.Tensor,
    material_mask: torch.Tensor,
    num_colors: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One unified-space row per available attribute label.

    An object with both labels contributes two rows sharing its logits. Material
    labels are shifted by ``num_colors``.

    Returns:
        ``(logits, labels, mask)`` where the mask is all true
    """
    logits = torch.cat([attribute_logits[color_mask], attribute_logits[material_mask]])
    labels = torch.cat([colors[color_mask], materials[material_mask] + num_colors])
    return logits, labels, torch.ones_like(labels, dtype=torch.bool)


def uce_attribute_loss(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy over the unified color and material classes."""
    return masked_cross_entropy(logits, labels, mask)


def rpn_loss(
    output: RPNOutput, targets: Sequence[AnchorTargets]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Objectness and box losses over the sampled anchors of a batch.

    Objectness is binary cross-entropy averaged over sampled anchors. The box
    term is smooth-L1 summed over sampled positives and divided by the number of
    sampled anchors.
    """
    labels = torch.stack([t.labels for t in targets])
    sampled = torch.stack([t.sampled for t in targets])
    deltas = torch.stack([t.deltas for t in targets])
    if not bool(sampled.any()):
        return _zero(output.objectness), _zero(output.deltas)

    count = sampled.sum()
    objectness = F.binary_cross_entropy_with_logits(
        output.objectness[sampled], (labels[sampled] == POSITIVE).to(output.objectness)
    )
    positive = sampled & (labels == POSITIVE)
    box = (
        F.smooth_l1_loss(
            output.deltas[positive],
            deltas[positive],
            beta=RPN_SMOOTH_L1_BETA,
            reduction="sum",
        )
        / count
    )
    return objectness, box


def detection_loss(
    outputs: HeadOutputs, targets: RoITargets
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Classification over all sampled RoIs and class-specific box regression.

    The box term is smooth-L1 summed over foreground RoIs, using the deltas of
    each RoI's target class, and divided by the number of sampled RoIs.
    """
    if len(targets) == 0:
        return _zero(outputs.category_logits), _zero(outputs.box_deltas)
    cls = F.cross_entropy(outputs.category_logits, targets.labels)
    fg = torch.nonzero(targets.foreground).flatten()
    predicted = outputs.box_deltas[fg, targets.labels[fg] - 1]
    loc = (
        F.smooth_l1_loss(
            predicted,
            targets.deltas[fg],
            beta=DETECTION_SMOOTH_L1_BETA,
            reduction="sum",
        )
        / len(targets)
    )
    return cls, loc


def attribute_loss(
    outputs: HeadOutputs, targets: RoITargets, unified: bool, num_colors: int
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor], Optional[torch.Tensor]]:
    """``(color, material, attr)`` for the head kind of ``outputs``."""
    if not outputs.has_attributes:
        return None, None, None
    if unified:
        assert outputs.attribute_logits is not None
        rows = build_uce_rows(
            outputs.attribute_logits,
            targets.colors,
            targets.color_mask,
            targets.materials,
            targets.material_mask,
            num_colors,
        )
        return None, None, uce_attribute_loss(*rows)
    assert outputs.color_logits is not None and outputs.material_logits is not None
    color, material = sce_attribute_loss(
        outputs.color_logits,
        targets.colors,
        targets.color_mask,
        outputs.material_logits,
        targets.materials,
        targets.material_mask,
    )
    return color, material, color + material
