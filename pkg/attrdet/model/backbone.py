"""Desk-scale residual backbone with a feature pyramid."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ModelError


@dataclass(frozen=True)
class BackboneConfig:
    """Residual backbone layout.

    Stage ``i`` (0-based) produces pyramid level ``i + 2`` at stride ``2 ** (i + 2)``.

    Attributes:
        widths: Output channels per stage
        blocks: Residual blocks per stage
        pyramid_levels: Levels emitted by the feature pyramid
        fpn_channels: Channels of every pyramid output
        stem_channels: Channels of the stride-2 stem
    """

    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    pyramid_levels: Tuple[int, ...] = (2, 3, 4, 5)
    fpn_channels: int = 64
    stem_channels: int = 16

    def __post_init__(self) -> None:
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ModelError("widths and blocks must have the same non-zero length")
        if len(self.pyramid_levels) < 2:
            raise ModelError("at least 2 pyramid levels are required")
        valid = set(range(2, len(self.widths) + 2))
        if not set(self.pyramid_levels) <= valid:
            raise ModelError(f"pyramid levels must lie in {sorted(valid)}")
        if list(self.pyramid_levels) != sorted(set(self.pyramid_levels)):
            raise ModelError("pyramid levels must be strictly increasing")

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(2**level for level in self.pyramid_levels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackboneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.norm2 = _norm(out_channels)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                _norm(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetFPN(nn.Module):
    """Residual stages followed by a top-down feature pyramid.

    ``forward`` returns one map per entry of ``config.pyramid_levels``, each with
    ``config.fpn_channels`` channels.
    """

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(3, config.stem_channels, 3, 2, 1, bias=False),
            _norm(config.stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_channels = config.stem_channels
        depth = config.pyramid_levels[-1] - 1
        for width, count in zip(config.widths[:depth], config.blocks[:depth]):
            layers = [BasicBlock(in_channels, width, stride=2)]
            layers += [BasicBlock(width, width, stride=1) for _ in range(count - 1)]
            stages.append(nn.Sequential(*layers))
            in_channels = width
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(
            nn.Conv2d(config.widths[level - 2], config.fpn_channels, 1)
            for level in config.pyramid_levels
        )
        self.output = nn.ModuleList(
            nn.Conv2d(config.fpn_channels, config.fpn_channels, 3, 1, 1)
            for _ in config.pyramid_levels
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        by_level = {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            by_level[i + 2] = x

        levels = self.config.pyramid_levels
        top = self.lateral[-1](by_level[levels[-1]])
        outputs = [self.output[-1](top)]
        for idx in range(len(levels) - 2, -1, -1):
            lateral = self.lateral[idx](by_level[levels[idx]])
            top = lateral + F.interpolate(top, size=lateral.shape[-2:], mode="nearest")
            outputs.insert(0, self.output[idx](top))
        return outputs
