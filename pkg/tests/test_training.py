import json

import numpy as np
import pytest

from kdpose.autograd import DimensionError
from kdpose.network import STUDENT_SPEC, build, load_checkpoint
from kdpose.training import TrainConfig, train_student, train_teacher

FAST = dict(epochs=2, augment=False, eval_samples=4, lr=1e-3)


def params_bytes(net):
    return b"".join(p.data.tobytes() for p in net.parameters())


def test_two_epochs_log_and_checkpoint(small_dataset, tmp_path):
    train, test, _ = small_dataset
    res = train_student(train, TrainConfig(**FAST), None, 1, test, tmp_path, tmp_path / "log.jsonl")
    assert len(res.log) == 2
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    assert {"loss", "L_mse", "L_od", "L_fs", "lr", "test_keypoint_error"} <= set(res.log[0])
    back = load_checkpoint(tmp_path)
    assert params_bytes(back) == params_bytes(res.network)
    assert back.metadata["role"] == "student" and back.metadata["epochs_run"] == 2


def test_fixed_seed_bit_identical(small_dataset):
    train = small_dataset[0][:8]
    cfg = TrainConfig(epochs=1, batch_size=4, eval_samples=0, augment=True, seed=3)
    a = train_student(train, cfg)
    b = train_student(train, cfg)
    assert params_bytes(a.network) == params_bytes(b.network)
    assert a.step_losses == b.step_losses


def test_zero_lambdas_with_teacher_match_baseline(small_dataset):
    train = small_dataset[0][:8]
    teacher = build(STUDENT_SPEC.__class__.from_dict({**STUDENT_SPEC.to_dict(), "role": "teacher"}), 5)
    cfg = TrainConfig(epochs=1, batch_size=4, eval_samples=0, augment=False, lambda1=0.0, lambda2=0.0)
    base = train_student(train, cfg)
    dist = train_student(train, cfg, teacher)
    assert [s["loss"] for s in base.step_losses] == [s["loss"] for s in dist.step_losses]
    assert params_bytes(base.network) == params_bytes(dist.network)


def test_clone_teacher_gives_zero_distillation_terms(small_dataset):
    train = small_dataset[0][:8]
    teacher = build(STUDENT_SPEC, 2)
    before = teacher.checksum()
    cfg = TrainConfig(epochs=1, batch_size=4, eval_samples=0, augment=False, lambda1=0.5, lambda2=0.5)
    res = train_student(train, cfg, teacher, initial=teacher)
    first = res.step_losses[0]
    assert first["L_od"] == 0.0 and first["L_fs"] == 0.0
    assert teacher.checksum() == before
    assert res.step_losses[1]["L_od"] > 0  # the student moves away after the first update


def test_head_mismatch_raises(small_dataset):
    train = small_dataset[0][:4]
    teacher = build(STUDENT_SPEC.__class__.from_dict({**STUDENT_SPEC.to_dict(), "C": 2}), 0)
    with pytest.raises(DimensionError):
        train_student(train, TrainConfig(epochs=1), teacher)


def test_empty_split_raises():
    with pytest.raises(ValueError):
        train_teacher([], TrainConfig(epochs=1))


def test_loss_decreases_on_small_set(small_dataset):
    train = small_dataset[0]
    res = train_teacher(train, TrainConfig(epochs=4, augment=False, eval_samples=0, lr=1e-3))
    assert res.log[-1]["loss"] < res.log[0]["loss"]


def test_config_validation_and_round_trip(tmp_path):
    cfg = TrainConfig(lr=3e-4, rotation_range=(-10, 10))
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    assert cfg.lr_at(0) == 3e-4 and cfg.lr_at(cfg.lr_halving_epochs) == 1.5e-4
    for bad in ({"lr": 0}, {"lambda1": -1}, {"norm_exponent": 3}, {"peak_threshold": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})
    assert cfg.spec_for("student", 2).C == 2
