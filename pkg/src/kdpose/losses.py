"""Training objectives: pose loss, output distillation, feature-similarity distillation.

Per-map squared norms are sums over pixels, normalised by the number of
belief maps ``I = K*C`` and vector fields ``J = (K-1)*C``. With a batch
dimension every loss is the mean of the per-image losses.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from .autograd import DimensionError, Tensor

DEFAULT_LAMBDA1 = 0.5
DEFAULT_LAMBDA2 = 0.00005


@dataclass(frozen=True)
class DistillConfig:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    norm_exponent: int = 1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("distillation weights must be nonnegative")
        if self.norm_exponent not in (1, 2):
            raise ValueError("norm_exponent must be 1 or 2")


def _sum_sq_per_map(pred: Tensor, target: Tensor, n_maps: int) -> Tensor:
    """(1/n_maps) * sum over maps of ||pred - target||^2, batch-averaged."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    batch = pred.shape[0] if pred.data.ndim == 4 else 1
    # mse averages over every element; rescale to per-map sums over pixels
    return ag.scale(ag.mse(pred, target), pred.data.size / (batch * n_maps))


def _constant(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else ag.as_tensor(x)


def _n_maps(maps: Tensor, per_map_channels: int = 1) -> int:
    return maps.shape[-3] // per_map_channels


def loss_mse(pred_maps: Tensor, pred_fields: Tensor, gt_maps, gt_fields) -> Tensor:
    """Pose-estimation loss on belief maps plus vector fields."""
    gt_maps, gt_fields = ag.as_tensor(gt_maps), ag.as_tensor(gt_fields)
    n_belief = _n_maps(pred_maps)
    n_fields = _n_maps(pred_fields, 2)
    return ag.add(_sum_sq_per_map(pred_maps, gt_maps, n_belief),
                  _sum_sq_per_map(pred_fields, gt_fields, n_fields))


def loss_od(student_maps: Tensor, student_fields: Tensor, teacher_maps, teacher_fields) -> Tensor:
    """Output distillation: the pose loss with teacher outputs as (constant) targets."""
    tm, tf = _constant(teacher_maps), _constant(teacher_fields)
    if student_maps.shape != tm.shape or student_fields.shape != tf.shape:
        raise DimensionError("student and teacher heads differ in shape")
    return loss_mse(student_maps, student_fields, tm, tf)


def similarity_matrix(features, norm_exponent: int = 1) -> Tensor:
    return ag.similarity_matrix(ag.as_tensor(features), norm_exponent)


def loss_fs(student_features: Tensor, teacher_features, norm_exponent: int = 1) -> Tensor:
    """Squared Frobenius distance between student and teacher similarity matrices.

    Channel counts may differ; spatial sizes must agree. Teacher features
    are treated as constants.
    """
    tfeat = _constant(teacher_features)
    s_shape, t_shape = student_features.shape, tfeat.shape
    if len(s_shape) != len(t_shape) or s_shape[-2:] != t_shape[-2:] or (
            len(s_shape) == 4 and s_shape[0] != t_shape[0]):
        raise DimensionError(f"feature maps not spatially aligned: {s_shape} vs {t_shape}")
    gs = ag.similarity_matrix(student_features, norm_exponent)
    with ag.no_grad():
        gt = ag.similarity_matrix(tfeat, norm_exponent)
    batch = s_shape[0] if len(s_shape) == 4 else 1
    return ag.scale(ag.mse(gs, gt), gs.data.size / batch)


@dataclass
class LossBreakdown:
    total: Tensor
    mse: float
    od: float
    fs: float


def total_loss(gt_maps, gt_fields, student_maps: Tensor, student_fields: Tensor,
               teacher_maps=None, teacher_fields=None, student_features: Tensor | None = None,
               teacher_features=None, config: DistillConfig = DistillConfig(),
               breakdown: bool = False):
    """``L_mse + lambda1 * L_od + lambda2 * L_fs``.

    A term whose weight is zero (or whose teacher inputs are missing) is
    skipped entirely, so the zero-weight objective is exactly ``L_mse``.
    """
    loss = loss_mse(student_maps, student_fields, gt_maps, gt_fields)
    l_mse, l_od, l_fs = float(loss.data), 0.0, 0.0
    if config.lambda1 > 0 and teacher_maps is not None:
        od = loss_od(student_maps, student_fields, teacher_maps, teacher_fields)
        l_od = float(od.data)
        loss = ag.add(loss, ag.scale(od, config.lambda1))
    if config.lambda2 > 0 and teacher_features is not None:
        fs = loss_fs(student_features, teacher_features, config.norm_exponent)
        l_fs = float(fs.data)
        loss = ag.add(loss, ag.scale(fs, config.lambda2))
    if breakdown:
        return LossBreakdown(loss, l_mse, l_od, l_fs)
    return loss
