"""The joint object and attribute detection network."""

from .backbone import BackboneConfig, ResNetFPN
from .checkpoint import checkpoint_path, load_checkpoint, save_checkpoint
from .detector import (
    Detector,
    DetectorConfig,
    ModelVariant,
    build_model,
    images_to_tensor,
    predict,
)
from .heads import AttributeHead, HeadOutputs, LabelEmbedding, ObjectHead
from .roi import RoIFeatureExtractor, StreamFeatures, assign_levels, pool_roi_features
from .rpn import (
    AnchorConfig,
    AnchorGenerator,
    Proposal,
    Proposals,
    RegionProposalNetwork,
    RPNConfig,
    RPNOutput,
    anchor_count,
)

__all__ = [
    "AnchorConfig",
    "AnchorGenerator",
    "AttributeHead",
    "BackboneConfig",
    "Detector",
    "DetectorConfig",
    "HeadOutputs",
    "LabelEmbedding",
    "ModelVariant",
    "ObjectHead",
    "Proposal",
    "Proposals",
    "RPNConfig",
    "RPNOutput",
    "RegionProposalNetwork",
    "ResNetFPN",
    "RoIFeatureExtractor",
    "StreamFeatures",
    "anchor_count",
    "assign_levels",
    "build_model",
    "checkpoint_path",
    "images_to_tensor",
    "load_checkpoint",
    "pool_roi_features",
    "predict",
    "save_checkpoint",
]
