from .core import (
    DetectionPredictions,
    DetectionTargets,
    DimensionError,
    Proposal,
    RegionFeature,
    assign_labels,
    classify_regions,
    detection_loss,
    extract_region_features,
    global_feature,
    infer,
    propose,
)
from .model import DetectorConfig, DetectorNet

__all__ = [
    "DetectionPredictions",
    "DetectionTargets",
    "DetectorConfig",
    "DetectorNet",
    "DimensionError",
    "Proposal",
    "RegionFeature",
    "assign_labels",
    "classify_regions",
    "detection_loss",
    "extract_region_features",
    "global_feature",
    "infer",
    "propose",
]
