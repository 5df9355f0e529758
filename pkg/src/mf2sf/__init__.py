"""Multi-frame to single-frame feature distillation for BEV point-cloud detection.

The pipeline: a teacher detector trained on dense clouds aggregated from
several sweeps (using ground-truth tracks to de-blur moving objects)
teaches a single-sweep student through an intermediate-feature consistency
loss. Synthetic LiDAR sequences provide the data and the yardstick.
"""

__version__ = "0.1.0"

from .backend import BACKEND, USE_NUMBA
from .detector import (
    DetectionOutput,
    GridConfig,
    PillarTensor,
    TargetMap,
    assign_targets,
    count_params,
    decode,
    forward,
    init_params,
    pillarize,
)
from .geometry import (
    BoundingBox,
    ObjectClass,
    PointCloudFrame,
    Pose,
    aggregate_static,
    aggregate_tracked,
    box_to_pose,
    points_in_box,
    transform_frame,
    wrap_angle,
    yaw_pose,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    average_precision,
    bev_iou,
    filter_gt_boxes,
    iou_3d,
    report_csv,
)
from .optim import AdamState, adam_step, load_checkpoint, lr_schedule, save_checkpoint
from .simdata import SceneConfig, Sequence, generate_sequence, read_sequence, write_sequence
from .training import (
    LossConfig,
    StageConfig,
    TrainingDataset,
    consistency_loss,
    focal_loss,
    huber_loss,
    train_baseline,
    train_stage1,
    train_stage2,
)

__all__ = [
    "AdamState",
    "BACKEND",
    "BoundingBox",
    "DetectionOutput",
    "EvalConfig",
    "EvalReport",
    "GridConfig",
    "LossConfig",
    "ObjectClass",
    "PillarTensor",
    "PointCloudFrame",
    "Pose",
    "SceneConfig",
    "Sequence",
    "StageConfig",
    "TargetMap",
    "TrainingDataset",
    "USE_NUMBA",
    "adam_step",
    "aggregate_static",
    "aggregate_tracked",
    "assign_targets",
    "average_precision",
    "bev_iou",
    "box_to_pose",
    "consistency_loss",
    "count_params",
    "decode",
    "filter_gt_boxes",
    "focal_loss",
    "forward",
    "generate_sequence",
    "huber_loss",
    "init_params",
    "iou_3d",
    "load_checkpoint",
    "lr_schedule",
    "pillarize",
    "points_in_box",
    "read_sequence",
    "report_csv",
    "save_checkpoint",
    "train_baseline",
    "train_stage1",
    "train_stage2",
    "transform_frame",
    "wrap_angle",
    "write_sequence",
    "yaw_pose",
]
