"""Anchors and the region proposal network."""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import nn

from ..geometry import Box, batched_nms, clip_boxes, decode_boxes, nonempty


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor shapes per location: side ``stride * scale``, aspect ``h / w = ratio``."""

    scales: Tuple[float, ...] = (2.0, 4.0, 8.0)
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class RPNConfig:
    pre_nms_top_n_train: int = 1000
    pre_nms_top_n_test: int = 500
    post_nms_top_n_train: int = 300
    post_nms_top_n_test: int = 100
    nms_threshold: float = 0.7
    min_size: float = 1.0


@dataclass(frozen=True)
class Proposal:
    """A class-agnostic RoI shared by both streams."""

    box: Box
    objectness: float
    source_level: int


@dataclass
class Proposals:
    """Proposals of one image as tensors, sorted by descending objectness.

    ``boxes`` never carries gradient.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    levels: torch.Tensor

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def to_list(self) -> List[Proposal]:
        return [
            Proposal(Box(*map(float, box)), float(score), int(level))
            for box, score, level in zip(
                self.boxes.tolist(), self.objectness.tolist(), self.levels.tolist()
            )
        ]


@dataclass
class RPNOutput:
    """Raw RPN predictions for a batch, kept for the RPN loss.

    Attributes:
        objectness: ``(N, A)`` logits over all anchors of all levels
        deltas: ``(N, A, 4)`` box deltas
        anchors: ``(A, 4)`` anchors shared by every image of the batch
        levels: ``(A,)`` pyramid level of each anchor
    """

    objectness: torch.Tensor
    deltas: torch.Tensor
    anchors: torch.Tensor
    levels: torch.Tensor


class AnchorGenerator:
    """Tiles anchors over every pyramid level.

    Anchors are ordered by level, then row, column and anchor shape, matching the
    flattening of the RPN head outputs.
    """

    def __init__(self, strides: Sequence[int], config: AnchorConfig) -> None:
        self.strides = tuple(strides)
        self.config = config

    def cell_anchors(self, stride: int) -> torch.Tensor:
        """``(scales x ratios, 4)`` anchors centred on the origin."""
        anchors = []
        for scale in self.config.scales:
            size = stride * scale
            for ratio in self.config.ratios:
                w = size / math.sqrt(ratio)
                h = size * math.sqrt(ratio)
                anchors.append([-w / 2, -h / 2, w / 2, h / 2])
        return torch.tensor(anchors, dtype=torch.float32)

    def grid_anchors(
        self,
        feature_sizes: Sequence[Tuple[int, int]],
        device: torch.device = torch.device("cpu"),
    ) -> List[torch.Tensor]:
        """One ``(H * W * A, 4)`` tensor per level."""
        result = []
        for (h, w), stride in zip(feature_sizes, self.strides):
            ys = (torch.arange(h, dtype=torch.float32, device=device) + 0.5) * stride
            xs = (torch.arange(w, dtype=torch.float32, device=device) + 0.5) * stride
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            shifts = torch.stack((cx, cy, cx, cy), dim=-1).reshape(-1, 1, 4)
            cell = self.cell_anchors(stride).to(device)
            result.append((shifts + cell[None]).reshape(-1, 4))
        return result


def anchor_count(
    height: int, width: int, strides: Sequence[int], config: AnchorConfig
) -> int:
    """Number of anchors for an image, assuming stride-aligned feature maps."""
    return sum(
        math.ceil(height / s) * math.ceil(width / s) * config.per_location
        for s in strides
    )


class RPNHead(nn.Module):
    def __init__(self, channels: int, anchors_per_location: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.objectness = nn.Conv2d(channels, anchors_per_location, 1)
        self.deltas = nn.Conv2d(channels, anchors_per_location * 4, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(
        self, features: Sequence[torch.Tensor]
    ) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        logits, deltas = [], []
        for feature in features:
            t = torch.relu(self.conv(feature))
            n, _, h, w = t.shape
            logits.append(self.objectness(t).permute(0, 2, 3, 1).reshape(n, -1))
            d = self.deltas(t).view(n, -1, 4, h, w).permute(0, 3, 4, 1, 2)
            deltas.append(d.reshape(n, -1, 4))
        return logits, deltas


class RegionProposalNetwork(nn.Module):
    """Objectness and box refinement over a dense anchor grid.

    Proposals are produced from detached predictions: no gradient flows from
    proposal coordinates back into the network.
    """

    def __init__(
        self,
        channels: int,
        pyramid_levels: Sequence[int],
        anchor_config: AnchorConfig,
        config: RPNConfig,
    ) -> None:
        super().__init__()
        self.pyramid_levels = tuple(pyramid_levels)
        self.config = config
        self.anchor_generator = AnchorGenerator(
            [2**level for level in pyramid_levels], anchor_config
        )
        self.head = RPNHead(channels, anchor_config.per_location)

    def forward(
        self,
        features: Sequence[torch.Tensor],
        image_sizes: Sequence[Tuple[int, int]],
    ) -> Tuple[List[Proposals], RPNOutput]:
        logits, deltas = self.head(features)
        anchors = self.anchor_generator.grid_anchors(
            [tuple(f.shape[-2:]) for f in features], features[0].device
        )
        levels = torch.cat(
            [
                torch.full((len(a),), level, dtype=torch.long, device=a.device)
                for a, level in zip(anchors, self.pyramid_levels)
            ]
        )
        output = RPNOutput(
            objectness=torch.cat(logits, dim=1),
            deltas=torch.cat(deltas, dim=1),
            anchors=torch.cat(anchors),
            levels=levels,
        )
        proposals = [
            self._filter(
                [lg[i].detach() for lg in logits],
                [d[i].detach() for d in deltas],
                anchors,
                size,
            )
            for i, size in enumerate(image_sizes)
        ]
        return proposals, output

    def _filter(
        self,
        logits: List[torch.Tensor],
        deltas: List[torch.Tensor],
        anchors: List[torch.Tensor],
        image_size: Tuple[int, int],
    ) -> Proposals:
        pre_n = (
            self.config.pre_nms_top_n_train
            if self.training
            else self.config.pre_nms_top_n_test
        )
        post_n = (
            self.config.post_nms_top_n_train
            if self.training
            else self.config.post_nms_top_n_test
        )
        boxes, scores, levels = [], [], []
        for lg, d, a, level in zip(logits, deltas, anchors, self.pyramid_levels):
            top = torch.topk(lg, min(pre_n, lg.numel()), sorted=True).indices
            decoded = clip_boxes(decode_boxes(d[top], a[top]), *image_size)
            boxes.append(decoded)
            scores.append(lg[top])
            levels.append(torch.full_like(top, level))
        all_boxes = torch.cat(boxes)
        all_scores = torch.cat(scores)
        all_levels = torch.cat(levels)

        keep = nonempty(all_boxes, self.config.min_size)
        all_boxes, all_scores, all_levels = (
            all_boxes[keep],
            all_scores[keep],
            all_levels[keep],
        )
        keep = batched_nms(
            all_boxes,
            all_scores,
            torch.zeros_like(all_levels),
            self.config.nms_threshold,
        )[:post_n]
        return Proposals(
            boxes=all_boxes[keep],
            objectness=torch.sigmoid(all_scores[keep]),
            levels=all_levels[keep],
        )

