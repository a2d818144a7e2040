import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kdpose.estimator import BeliefMapEncoder, KeypointPoseEstimator, check_samples
from kdpose.synth import SceneSample


def test_get_params_and_clone():
    est = KeypointPoseEstimator(role="student", epochs=3, lambda1=0.1)
    params = est.get_params()
    assert params["epochs"] == 3 and params["lambda1"] == 0.1 and params["role"] == "student"
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(lr=5e-4)
    assert est.lr == 5e-4


def test_predict_before_fit_raises(small_dataset):
    with pytest.raises(NotFittedError):
        KeypointPoseEstimator().predict(small_dataset[1])
    with pytest.raises(NotFittedError):
        BeliefMapEncoder().transform(small_dataset[1])


def test_fit_predict_score_small(small_dataset):
    train, test, manifest = small_dataset
    est = KeypointPoseEstimator(role="student", epochs=1, augment=False, models=manifest.models)
    assert est.fit(train[:8]) is est
    assert len(est.training_log_) == 1
    preds = est.predict(test[:3])
    assert len(preds) == 3 and all(isinstance(p, list) for p in preds)
    assert 0.0 <= est.score(test[:3]) <= 100.0


def test_student_accepts_fitted_teacher_estimator(small_dataset):
    train = small_dataset[0][:4]
    teacher = KeypointPoseEstimator(role="teacher", epochs=1, augment=False).fit(train)
    student = KeypointPoseEstimator(role="student", teacher=teacher, epochs=1, augment=False).fit(train)
    assert student.network_.metadata["role"] == "student-distilled"


def test_bad_role_raises(small_dataset):
    with pytest.raises(ValueError):
        KeypointPoseEstimator(role="pupil").fit(small_dataset[0][:2])


def test_encoder_shapes(small_dataset):
    test = small_dataset[1]
    maps, fields = BeliefMapEncoder().fit(test).transform(test[:2])
    assert maps.shape == (2, 9, 32, 32) and fields.shape == (2, 16, 32, 32)
    assert maps.max() <= 1.0
    with pytest.raises(ValueError):
        BeliefMapEncoder(sigma=0).fit(test)


def test_check_samples_errors(small_dataset):
    s = small_dataset[1][0]
    with pytest.raises(ValueError):
        check_samples([])
    with pytest.raises(TypeError):
        check_samples([np.zeros((3, 8, 8))])
    with pytest.raises(ValueError, match="divisible"):
        check_samples([SceneSample(np.zeros((3, 30, 30), np.float32), [], s.intrinsics)])
    with pytest.raises(ValueError, match="non-finite"):
        check_samples([SceneSample(np.full((3, 32, 32), np.nan, np.float32), [], s.intrinsics)])
    with pytest.raises(ValueError, match="differs"):
        check_samples([s, SceneSample(np.zeros((3, 32, 32), np.float32), [], s.intrinsics)])
    with pytest.raises(ValueError, match="labelled"):
        check_samples([SceneSample(np.zeros((3, 32, 32), np.float32), [], s.intrinsics)], require_labels=True)
    assert check_samples(s) == [s]
