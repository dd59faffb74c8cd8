"""Category, box and attribute prediction heads."""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from ..errors import ModelError

CROSS_LINK_TARGETS = ("both", "material")


@dataclass
class HeadOutputs:
    """Per-RoI predictions.

    Attributes:
        category_logits: ``(K, C + 1)`` with background at index 0
        box_deltas: ``(K, C, 4)`` class-wise deltas for the foreground classes
        color_logits: ``(K, |colors|)`` or ``None`` without attribute heads
        material_logits: ``(K, |materials|)`` or ``None`` without attribute heads
        attribute_logits: ``(K, |colors| + |materials|)`` for the unified head only
    """

    category_logits: torch.Tensor
    box_deltas: torch.Tensor
    color_logits: Optional[torch.Tensor] = None
    material_logits: Optional[torch.Tensor] = None
    attribute_logits: Optional[torch.Tensor] = None

    @property
    def has_attributes(self) -> bool:
        return self.color_logits is not None


class ObjectHead(nn.Module):
    """Category classifier and class-wise box regressor."""

    def __init__(self, in_dim: int, num_categories: int) -> None:
        super().__init__()
        self.num_categories = num_categories
        self.cls_score = nn.Linear(in_dim, num_categories + 1)
        self.bbox_pred = nn.Linear(in_dim, num_categories * 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        deltas = self.bbox_pred(features).view(-1, self.num_categories, 4)
        return self.cls_score(features), deltas


class LabelEmbedding(nn.Module):
    """Object-label embedding fused with RoI features by a linear layer.

    Row 0 of the table is the background class.
    """

    def __init__(self, num_categories: int, in_dim: int, embedding_dim: int) -> None:
        super().__init__()
        self.embedding = nn.Embedding(num_categories + 1, embedding_dim)
        self.fuse = nn.Linear(in_dim + embedding_dim, in_dim)

    def forward(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        fused = torch.cat([features, self.embedding(labels)], dim=1)
        return torch.relu(self.fuse(fused))


class AttributeHead(nn.Module):
    """Color and material classifiers.

    With ``unified`` a single layer predicts over colors followed by materials.
    Otherwise color and material have separate layers. A cross-link input of
    ``cross_dim`` features is concatenated in front of the layers named by
    ``cross_link_targets``; the caller is responsible for detaching it.
    """

    def __init__(
        self,
        in_dim: int,
        num_colors: int,
        num_materials: int,
        unified: bool = False,
        cross_dim: int = 0,
        cross_link_targets: str = "both",
    ) -> None:
        super().__init__()
        if cross_link_targets not in CROSS_LINK_TARGETS:
            raise ModelError(
                f"cross_link_targets must be one of {', '.join(CROSS_LINK_TARGETS)}"
            )
        if unified and cross_link_targets != "both":
            raise ModelError("unified attribute head cannot link material only")
        self.num_colors = num_colors
        self.num_materials = num_materials
        self.unified = unified
        self.cross_dim = cross_dim
        self.link_color = cross_dim > 0 and cross_link_targets == "both"
        self.link_material = cross_dim > 0

        self.attribute: Optional[nn.Linear] = None
        self.color: Optional[nn.Linear] = None
        self.material: Optional[nn.Linear] = None
        if unified:
            self.attribute = nn.Linear(in_dim + cross_dim, num_colors + num_materials)
        else:
            self.color = nn.Linear(in_dim + cross_dim * self.link_color, num_colors)
            if num_materials:
                self.material = nn.Linear(
                    in_dim + cross_dim * self.link_material, num_materials
                )
        for layer in (self.attribute, self.color, self.material):
            if layer is not None:
                nn.init.normal_(layer.weight, std=0.01)
                nn.init.zeros_(layer.bias)

    def forward(
        self, features: torch.Tensor, cross: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        """Return ``(color_logits, material_logits, unified_logits_or_None)``."""
        if self.cross_dim and cross is None:
            raise ModelError("cross-linked attribute head needs object features")
        linked = features if cross is None else torch.cat([features, cross], dim=1)

        if self.attribute is not None:
            logits = self.attribute(linked)
            return logits[:, : self.num_colors], logits[:, self.num_colors :], logits

        assert self.color is not None
        color = self.color(linked if self.link_color else features)
        if self.material is None:
            material = features.new_zeros((features.shape[0], 0))
        else:
            material = self.material(linked if self.link_material else features)
        return color, material, None
