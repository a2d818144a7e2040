"""Scikit-learn style wrappers around target encoding, training and pose prediction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .codec import DEFAULT_RADIUS, DEFAULT_SIGMA, encode_targets
from .evaluation import estimate_poses, evaluate
from .network import PoseNetwork, forward, load_checkpoint
from .synth import SceneSample, default_models
from .training import TrainConfig, train_student, train_teacher


def check_samples(samples, require_labels: bool = False) -> list[SceneSample]:
    """Validate a sequence of scenes: nonempty, same resolution, divisible by 4, 3-channel finite images."""
    if isinstance(samples, SceneSample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError("expected at least one sample")
    res = None
    for i, s in enumerate(samples):
        if not isinstance(s, SceneSample):
            raise TypeError(f"sample {i} is {type(s).__name__}, not SceneSample")
        img = np.asarray(s.image)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"sample {i}: image must be (3, H, W), got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"sample {i}: image holds non-finite values")
        if res is None:
            res = img.shape[1:]
            if res[0] % 4 or res[1] % 4:
                raise ValueError(f"resolution {res} is not divisible by 4")
        elif img.shape[1:] != res:
            raise ValueError(f"sample {i}: resolution {img.shape[1:]} differs from {res}")
        if require_labels and not s.instances:
            raise ValueError(f"sample {i} has no labelled instances")
    return samples


class BeliefMapEncoder(BaseEstimator, TransformerMixin):
    """Turns labelled scenes into stacked belief-map and vector-field targets."""

    def __init__(self, n_classes=1, sigma=DEFAULT_SIGMA, radius=DEFAULT_RADIUS):
        self.n_classes = n_classes
        self.sigma = sigma
        self.radius = radius

    def fit(self, X, y=None):
        check_samples(X)
        if self.sigma <= 0 or self.radius <= 0:
            raise ValueError("sigma and radius must be positive")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        maps, fields = [], []
        for s in check_samples(X):
            kps = np.array([inst.keypoints2d for inst in s.instances]).reshape(len(s.instances), -1, 2)
            m, f = encode_targets(kps, [inst.class_id for inst in s.instances], self.n_classes,
                                  s.resolution, self.sigma, self.radius)
            maps.append(m)
            fields.append(f)
        return np.stack(maps), np.stack(fields)


class KeypointPoseEstimator(BaseEstimator):
    """Keypoint network + PnP pose estimator.

    ``role="teacher"`` trains the wide network on the pose loss alone.
    ``role="student"`` trains the compact network, distilling from
    ``teacher`` (a fitted estimator, a ``PoseNetwork`` or a checkpoint
    directory) when one is given.
    """

    def __init__(self, role="teacher", teacher=None, n_classes=1, lr=1e-4, lr_halving_epochs=20, epochs=60,
                 batch_size=8, lambda1=0.5, lambda2=0.00005, norm_exponent=1, augment=True, seed=0,
                 models=None):
        self.role = role
        self.teacher = teacher
        self.n_classes = n_classes
        self.lr = lr
        self.lr_halving_epochs = lr_halving_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.norm_exponent = norm_exponent
        self.augment = augment
        self.seed = seed
        self.models = models

    def _config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lr_halving_epochs=self.lr_halving_epochs, epochs=self.epochs,
                           batch_size=self.batch_size, lambda1=self.lambda1, lambda2=self.lambda2,
                           norm_exponent=self.norm_exponent, augment=self.augment, seed=self.seed)

    def _teacher_network(self) -> PoseNetwork | None:
        t = self.teacher
        if t is None or isinstance(t, PoseNetwork):
            return t
        if isinstance(t, KeypointPoseEstimator):
            check_is_fitted(t, "network_")
            return t.network_
        return load_checkpoint(t)

    def fit(self, X, y=None):
        samples = check_samples(X, require_labels=True)
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be 'teacher' or 'student', got {self.role!r}")
        cfg = self._config()
        if self.role == "teacher":
            res = train_teacher(samples, cfg, self.n_classes)
        else:
            res = train_student(samples, cfg, self._teacher_network(), self.n_classes)
        self.network_ = res.network
        self.training_log_ = res.log
        self.models_ = list(self.models) if self.models is not None else default_models(self.n_classes)
        return self

    def predict(self, X):
        """Per sample, a list of ``(class_id, Pose or None)`` for every detected instance."""
        check_is_fitted(self, "network_")
        samples = check_samples(X)
        by_class = {m.class_id: m for m in self.models_}
        out = []
        for start in range(0, len(samples), 16):
            chunk = samples[start:start + 16]
            with ag.no_grad():
                maps, fields, _ = forward(self.network_, np.stack([s.image for s in chunk]))
            for s, m, f in zip(chunk, maps.data, fields.data):
                pairs = estimate_poses(m, f, by_class, s.intrinsics, self.n_classes)
                out.append([(det.class_id, pose) for det, pose in pairs])
        return out

    def score(self, X, y=None):
        """ADD(-S) < 0.1 diameter accuracy in percent."""
        check_is_fitted(self, "network_")
        return evaluate(self.network_, check_samples(X, require_labels=True), self.models_).add_accuracy
