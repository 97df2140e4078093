"""Face parsing with an invertible RoI tanh warp.

The pipeline aligns a face from five landmarks, warps the whole image into a
fixed-size frame that magnifies the face and compresses the periphery, runs
a hybrid network (box regression + per-component mask heads + a full-frame
outer head), and maps the assembled class scores back onto the source image.
"""

from .geometry import (
    TEMPLATE_POINTS,
    SimilarityTransform,
    atanh_map,
    estimate_similarity,
    face_rect_corners,
    tanh_map,
)
from .model import (
    CLASS_NAMES,
    DEFAULT_PALETTE,
    HybridModel,
    ModelConfig,
    ParseOutput,
    assemble_scores,
    load_model,
    parse_face,
    paper_scale_config,
    save_model,
)
from .sampler import (
    Box,
    bilinear_sample,
    box_iou,
    pad_box,
    roi_align,
    roi_tanh_dewarp,
    roi_tanh_warp,
)
from .training import (
    TrainConfig,
    TrainSample,
    augment,
    generate_synthetic,
    gt_boxes_from_labels,
    train,
)
from .evaluation import ClassScores, f_measure, fuse_multiface

__version__ = "0.1.0"

__all__ = [
    "TEMPLATE_POINTS",
    "SimilarityTransform",
    "estimate_similarity",
    "face_rect_corners",
    "tanh_map",
    "atanh_map",
    "Box",
    "bilinear_sample",
    "box_iou",
    "pad_box",
    "roi_align",
    "roi_tanh_warp",
    "roi_tanh_dewarp",
    "CLASS_NAMES",
    "DEFAULT_PALETTE",
    "HybridModel",
    "ModelConfig",
    "ParseOutput",
    "assemble_scores",
    "parse_face",
    "paper_scale_config",
    "save_model",
    "load_model",
    "TrainConfig",
    "TrainSample",
    "augment",
    "generate_synthetic",
    "gt_boxes_from_labels",
    "train",
    "ClassScores",
    "f_measure",
    "fuse_multiface",
]
