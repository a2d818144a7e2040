"""Keypoint-based 6D pose estimation with teacher/student knowledge distillation, in numpy."""
from .codec import decode, encode_targets, well_separated
from .estimator import BeliefMapEncoder, KeypointPoseEstimator, check_samples
from .evaluation import EvalReport, ablate, evaluate
from .geometry import CameraIntrinsics, ObjectModel, Pose, add_metric, adds_metric, projection_metric
from .losses import DistillConfig, loss_fs, loss_mse, loss_od, similarity_matrix, total_loss
from .network import STUDENT_SPEC, TEACHER_SPEC, NetworkSpec, build, count_flops, count_params, forward
from .pnp import solve_pnp
from .synth import EASY_OPTIONS, SceneOptions, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "BeliefMapEncoder", "CameraIntrinsics", "DistillConfig", "EASY_OPTIONS", "EvalReport", "KeypointPoseEstimator",
    "NetworkSpec", "ObjectModel", "Pose", "STUDENT_SPEC", "SceneOptions", "TEACHER_SPEC", "TrainConfig",
    "ablate", "add_metric", "adds_metric", "build", "check_samples", "count_flops", "count_params", "decode",
    "encode_targets", "evaluate", "forward", "generate_dataset", "loss_fs", "loss_mse", "loss_od",
    "projection_metric", "read_dataset", "similarity_matrix", "solve_pnp", "total_loss", "train_student",
    "train_teacher", "well_separated", "write_dataset",
]
