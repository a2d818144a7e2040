"""Teacher training and student distillation loops."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .codec import decode, encode_targets
from .losses import DistillConfig, total_loss
from .network import (STUDENT_SPEC, TEACHER_SPEC, NetworkSpec, PoseNetwork, build, forward,
                      save_checkpoint)
from .optim import AdamState, adam_step
from .synth import AugmentConfig, ResampleRequested, SceneSample, augment

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_halving_epochs: int = 20
    epochs: int = 60
    batch_size: int = 8
    lambda1: float = 0.5
    lambda2: float = 0.00005
    sigma: float = 2.0
    vector_radius: float = 3.0
    peak_threshold: float = 0.3
    angle_threshold: float = 30.0
    norm_exponent: int = 1
    seed: int = 0
    augment: bool = True
    blur_prob: float = 0.5
    jitter_range: tuple[float, float] = (0.8, 1.2)
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    eval_samples: int = 64
    teacher: dict = field(default_factory=TEACHER_SPEC.to_dict)
    student: dict = field(default_factory=STUDENT_SPEC.to_dict)

    def __post_init__(self):
        self.jitter_range = tuple(self.jitter_range)
        self.rotation_range = tuple(self.rotation_range)
        positive = ("lr", "lr_halving_epochs", "epochs", "batch_size", "sigma", "vector_radius")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be nonnegative")
        if not 0 < self.peak_threshold < 1:
            raise ValueError("peak_threshold must lie in (0, 1)")
        if self.norm_exponent not in (1, 2):
            raise ValueError("norm_exponent must be 1 or 2")

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.lambda1, self.lambda2, self.norm_exponent)

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.blur_prob, self.jitter_range, self.rotation_range)

    def spec_for(self, role: str, n_classes: int) -> NetworkSpec:
        d = dict(self.teacher if role == "teacher" else self.student)
        d["role"] = role
        d["C"] = n_classes
        return NetworkSpec.from_dict(d)

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halving_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter_range"] = list(self.jitter_range)
        d["rotation_range"] = list(self.rotation_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    network: PoseNetwork
    log: list[dict]
    step_losses: list[dict]
    checkpoint: Path | None = None


def _targets(sample: SceneSample, n_classes: int, config: TrainConfig):
    kps = [inst.keypoints2d for inst in sample.instances]
    cls = [inst.class_id for inst in sample.instances]
    return encode_targets(np.array(kps).reshape(len(cls), -1, 2), cls, n_classes, sample.resolution,
                          config.sigma, config.vector_radius)


def _augmented(sample: SceneSample, rng, config: TrainConfig) -> SceneSample:
    if not config.augment:
        return sample
    for _ in range(5):
        try:
            return augment(sample, rng, config.augment_config)
        except ResampleRequested:
            continue
    return sample


def keypoint_error(network: PoseNetwork, samples, config: TrainConfig, n_classes: int) -> dict:
    """Mean input-resolution pixel error of decoded keypoints against labels."""
    errs, found, total = [], 0, 0
    for start in range(0, len(samples), 16):
        chunk = samples[start:start + 16]
        with ag.no_grad():
            maps, flds, _ = forward(network, np.stack([s.image for s in chunk]))
        for s, m, f in zip(chunk, maps.data, flds.data):
            dets = decode(m, f, n_classes, network.spec.K, config.peak_threshold, config.angle_threshold)
            for inst in s.instances:
                total += inst.keypoints2d.shape[0]
                cands = [d for d in dets if d.class_id == inst.class_id]
                if not cands:
                    continue
                det = min(cands, key=lambda d: np.linalg.norm(d.centroid2d - inst.keypoints2d[-1]))
                pts, conf = det.keypoints()
                ok = conf > 0
                found += int(ok.sum())
                errs.extend(np.linalg.norm(pts[ok] - inst.keypoints2d[ok], axis=1).tolist())
    return {"test_keypoint_error": float(np.mean(errs)) if errs else None,
            "test_keypoint_recall": found / total if total else None}


def _train(network: PoseNetwork, train_samples, config: TrainConfig, n_classes: int, teacher=None,
           test_samples=None, out_dir=None, log_path=None, role="teacher") -> TrainResult:
    if not train_samples:
        raise ValueError("training split is empty")
    params = network.parameters()
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    distill = config.distill if teacher is not None else DistillConfig(0.0, 0.0, config.norm_exponent)
    use_od = teacher is not None and distill.lambda1 > 0
    use_fs = teacher is not None and distill.lambda2 > 0
    cache, teacher_cache = {}, {}
    if not config.augment:
        for i, s in enumerate(train_samples):
            cache[i] = _targets(s, n_classes, config)
        if use_od or use_fs:
            # frozen teacher + fixed inputs: its outputs can be computed once
            for start in range(0, len(train_samples), 16):
                chunk = np.stack([s.image for s in train_samples[start:start + 16]])
                with ag.no_grad():
                    outs = forward(teacher, chunk)
                for j in range(len(chunk)):
                    teacher_cache[start + j] = tuple(o.data[j] for o in outs)
    log, steps = [], []
    eval_set = list(test_samples or [])[:config.eval_samples]
    log_file = open(log_path, "w") if log_path is not None else None
    last_good = None
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = rng.permutation(len(train_samples))
            sums = {"loss": 0.0, "L_mse": 0.0, "L_od": 0.0, "L_fs": 0.0}
            n_batches = 0
            for b in range(0, len(order), config.batch_size):
                idx = order[b:b + config.batch_size]
                imgs, tm, tf = [], [], []
                for i in idx:
                    if config.augment:
                        s = _augmented(train_samples[i], rng, config)
                        mt, ft = _targets(s, n_classes, config)
                    else:
                        s = train_samples[i]
                        mt, ft = cache[i]
                    imgs.append(s.image)
                    tm.append(mt)
                    tf.append(ft)
                x = np.stack(imgs)
                t_maps = t_fields = t_feat = None
                if teacher_cache:
                    t_maps, t_fields, t_feat = (ag.Tensor(np.stack([teacher_cache[i][k] for i in idx]))
                                                for k in range(3))
                elif use_od or use_fs:
                    with ag.no_grad():
                        t_maps, t_fields, t_feat = forward(teacher, x)
                try:
                    maps, flds, feat = forward(network, x)
                    parts = total_loss(np.stack(tm), np.stack(tf), maps, flds,
                                       t_maps if use_od else None, t_fields if use_od else None,
                                       feat, t_feat if use_fs else None, distill, breakdown=True)
                    last_good = [p.data.copy() for p in params]
                    parts.total.backward()
                    adam_step(params, state, lr)
                    if not all(np.all(np.isfinite(p.data)) for p in params):
                        raise FloatingPointError("non-finite parameter after update")
                except FloatingPointError as exc:
                    ckpt = None
                    if last_good is not None and out_dir is not None:
                        for p, keep in zip(params, last_good):
                            p.data[...] = keep
                        ckpt = save_checkpoint(network, Path(out_dir) / "last_good",
                                               {"role": role, "config": config.to_dict(), "aborted": str(exc)})
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {n_batches}: {exc}", ckpt) from exc
                rec = {"L_mse": parts.mse, "L_od": parts.od, "L_fs": parts.fs, "loss": float(parts.total.data)}
                steps.append(rec)
                for k in sums:
                    sums[k] += rec[k]
                n_batches += 1
            rec = {"epoch": epoch + 1, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
            if eval_set:
                rec.update(keypoint_error(network, eval_set, config, n_classes))
            log.append(rec)
            logger.info("%s epoch %d: %s", role, epoch + 1, rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    network.metadata = {"role": role, "config": config.to_dict(), "epochs_run": len(log),
                        "final_loss": log[-1]["loss"] if log else None}
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(network, Path(out_dir), network.metadata)
    return TrainResult(network, log, steps, ckpt)


def train_teacher(train_samples, config: TrainConfig, n_classes: int = 1, test_samples=None,
                  out_dir=None, log_path=None) -> TrainResult:
    """Fit the teacher on the pose loss alone."""
    net = build(config.spec_for("teacher", n_classes), config.seed)
    return _train(net, train_samples, config, n_classes, None, test_samples, out_dir, log_path, "teacher")


def train_student(train_samples, config: TrainConfig, teacher: PoseNetwork | None = None, n_classes: int = 1,
                  test_samples=None, out_dir=None, log_path=None,
                  initial: PoseNetwork | None = None) -> TrainResult:
    """Fit the student; with a teacher the distillation terms are added.

    The teacher is never updated; its parameter checksum is verified after
    training.
    """
    net = initial.copy() if initial is not None else build(config.spec_for("student", n_classes), config.seed)
    if teacher is not None:
        if teacher.spec.K != net.spec.K or teacher.spec.C != net.spec.C:
            raise ag.DimensionError("teacher and student heads differ in shape")
        teacher.set_trainable(False)
        before = teacher.checksum()
    result = _train(net, train_samples, config, n_classes, teacher, test_samples, out_dir, log_path,
                    "student-distilled" if teacher is not None else "student")
    if teacher is not None and teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return result
