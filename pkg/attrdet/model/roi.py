"""Multi-level RoI feature extraction."""

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import nn
from torchvision.ops import roi_align


@dataclass
class StreamFeatures:
    """Per-RoI feature vectors of one stream, shape ``(K, D)``."""

    features: torch.Tensor
    stream: str

    def __len__(self) -> int:
        return int(self.features.shape[0])


def assign_levels(
    boxes: torch.Tensor,
    min_level: int,
    max_level: int,
    canonical_size: float = 224.0,
    canonical_level: int = 4,
) -> torch.Tensor:
    """Pyramid level per box: ``floor(k0 + log2(sqrt(w * h) / canonical_size))``.

    The result is clamped to ``[min_level, max_level]``.
    """
    side = torch.sqrt((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))
    levels = torch.floor(canonical_level + torch.log2(side / canonical_size + 1e-8))
    return levels.clamp(min=min_level, max=max_level).to(torch.long)


def rois_with_batch_index(boxes: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack per-image ``(K_i, 4)`` boxes into ``(K, 5)`` rows led by the image index."""
    rows = [
        torch.cat([torch.full_like(b[:, :1], i), b], dim=1) for i, b in enumerate(boxes)
    ]
    return torch.cat(rows) if rows else torch.zeros(0, 5)


def pool_roi_features(
    features: Sequence[torch.Tensor],
    pyramid_levels: Sequence[int],
    rois: torch.Tensor,
    output_size: int = 7,
    sampling_ratio: int = 2,
    canonical_size: float = 224.0,
    canonical_level: int = 4,
) -> torch.Tensor:
    """Bilinear RoI pooling from the pyramid level each RoI is assigned to.

    Args:
        features: One ``(N, C, H, W)`` map per pyramid level
        pyramid_levels: Level number of each map
        rois: ``(K, 5)`` rows ``(image_index, x1, y1, x2, y2)`` in image pixels
        output_size: Bins per side
        sampling_ratio: Bilinear samples per bin and axis
        canonical_size: Box side mapped to ``canonical_level``
        canonical_level: Level of a ``canonical_size`` box

    Returns:
        ``(K, C, output_size, output_size)`` pooled features; differentiable with
        respect to ``features`` only
    """
    rois = rois.detach()
    target = assign_levels(
        rois[:, 1:],
        pyramid_levels[0],
        pyramid_levels[-1],
        canonical_size,
        canonical_level,
    )
    channels = features[0].shape[1]
    out = features[0].new_zeros((rois.shape[0], channels, output_size, output_size))
    for feature, level in zip(features, pyramid_levels):
        idx = torch.nonzero(target == level).flatten()
        if idx.numel() == 0:
            continue
        out[idx] = roi_align(
            feature,
            rois[idx],
            output_size=output_size,
            spatial_scale=1.0 / 2**level,
            sampling_ratio=sampling_ratio,
            aligned=True,
        )
    return out


class RoIFeatureExtractor(nn.Module):
    """Pools RoIs from one stream's pyramid and maps them to ``representation_size``."""

    def __init__(
        self,
        channels: int,
        pyramid_levels: Sequence[int],
        stream: str,
        representation_size: int = 256,
        output_size: int = 7,
        sampling_ratio: int = 2,
        canonical_size: float = 224.0,
        canonical_level: int = 4,
    ) -> None:
        super().__init__()
        self.pyramid_levels = tuple(pyramid_levels)
        self.stream = stream
        self.output_size = output_size
        self.sampling_ratio = sampling_ratio
        self.canonical_size = canonical_size
        self.canonical_level = canonical_level
        self.fc6 = nn.Linear(channels * output_size * output_size, representation_size)
        self.fc7 = nn.Linear(representation_size, representation_size)

    def forward(
        self, features: Sequence[torch.Tensor], boxes: List[torch.Tensor]
    ) -> StreamFeatures:
        pooled = pool_roi_features(
            features,
            self.pyramid_levels,
            rois_with_batch_index(boxes).to(features[0]),
            self.output_size,
            self.sampling_ratio,
            self.canonical_size,
            self.canonical_level,
        )
        x = torch.relu(self.fc6(pooled.flatten(1)))
        return StreamFeatures(torch.relu(self.fc7(x)), self.stream)
