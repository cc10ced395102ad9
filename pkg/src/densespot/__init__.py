"""Temporally precise action spotting with dense detection anchors.

A library + CLI for per-anchor confidence and temporal-displacement
prediction over feature sequences, trained with SAM and mixup, post-processed
into detections, and scored with tolerance-based average-mAP.
"""

from .data import (
    ActionSet,
    ChunkSpec,
    FeatureSequence,
    SyntheticSpec,
    generate_synthetic,
    load_labels,
    read_features,
    sample_chunk,
    write_features,
)
from .estimator import DenseAnchorSpotter
from .evaluation import ToleranceSet, average_map, average_precision, match_detections
from .models import ModelConfig, SpottingModel, load_checkpoint, save_checkpoint
from .postprocess import Detection, PostprocConfig, consolidate, nms_per_class, spot
from .targets import (
    RadiusConfig,
    confidence_loss,
    displacement_loss,
    make_confidence_targets,
    make_displacement_targets,
)
from .training import (
    AdamW,
    OptimConfig,
    TrainPhase,
    TrainingDivergedError,
    linear_decay,
    mixup_batch,
    sam_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ActionSet",
    "AdamW",
    "ChunkSpec",
    "DenseAnchorSpotter",
    "Detection",
    "FeatureSequence",
    "ModelConfig",
    "OptimConfig",
    "PostprocConfig",
    "RadiusConfig",
    "SpottingModel",
    "SyntheticSpec",
    "ToleranceSet",
    "TrainPhase",
    "TrainingDivergedError",
    "average_map",
    "average_precision",
    "confidence_loss",
    "consolidate",
    "displacement_loss",
    "generate_synthetic",
    "linear_decay",
    "load_checkpoint",
    "load_labels",
    "make_confidence_targets",
    "make_displacement_targets",
    "match_detections",
    "mixup_batch",
    "nms_per_class",
    "read_features",
    "sam_step",
    "sample_chunk",
    "save_checkpoint",
    "spot",
    "train",
    "write_features",
]
