import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_fs, naive_pose_loss, naive_similarity
from kdpose import autograd as ag
from kdpose.autograd import DimensionError, Tensor
from kdpose.gradcheck import numeric_grad, rel_error
from kdpose.losses import (DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, DistillConfig, loss_fs, loss_mse, loss_od,
                           similarity_matrix, total_loss)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_defaults():
    assert DEFAULT_LAMBDA1 == 0.5 and DEFAULT_LAMBDA2 == 0.00005
    with pytest.raises(ValueError):
        DistillConfig(-1.0, 0.0)
    with pytest.raises(ValueError):
        DistillConfig(0.5, 0.0, 3)


def test_loss_mse_examples():
    rng = np.random.default_rng(0)
    m, f = rng.random((1, 9, 4, 4)), rng.random((1, 16, 4, 4))
    assert float(loss_mse(T(m), T(f), m, f).data) == 0.0
    pm = np.full((1, 1, 2, 2), 0.5)
    zf = np.zeros((1, 2, 2, 2))
    assert float(loss_mse(T(pm), T(zf), np.zeros((1, 1, 2, 2)), zf).data) == pytest.approx(1.0)


def test_loss_mse_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pm, gm = rng.random((2, 9, 5, 5)), rng.random((2, 9, 5, 5))
        pf, gf = rng.standard_normal((2, 16, 5, 5)), rng.standard_normal((2, 16, 5, 5))
        assert float(loss_mse(T(pm), T(pf), gm, gf).data) == pytest.approx(naive_pose_loss(pm, pf, gm, gf), abs=1e-9)


def test_loss_od_examples_and_teacher_constant():
    rng = np.random.default_rng(2)
    n_pix = 16
    s = rng.random((1, 1, 4, 4))
    zf = np.zeros((1, 2, 4, 4))
    assert float(loss_od(T(s), T(zf), s, zf).data) == 0.0
    assert float(loss_od(T(s + 0.2), T(zf), s, zf).data) == pytest.approx(n_pix * 0.04)
    tm = Tensor(s.copy(), requires_grad=True)
    tf = Tensor(zf.copy(), requires_grad=True)
    sm = Tensor(s + 0.2, requires_grad=True)
    loss_od(sm, Tensor(zf), tm, tf).backward()
    assert np.all(tm.grad == 0) and np.all(tf.grad == 0) and np.any(sm.grad != 0)
    with pytest.raises(DimensionError):
        loss_od(T(s), T(zf), s[:, :, :2], zf)


def test_loss_od_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    sm, sf = rng.random((1, 9, 3, 3)), rng.standard_normal((1, 16, 3, 3))
    tm, tf = rng.random((1, 9, 3, 3)), rng.standard_normal((1, 16, 3, 3))
    a, b = Tensor(sm.copy(), requires_grad=True), Tensor(sf.copy(), requires_grad=True)
    loss_od(a, b, tm, tf).backward()
    na, nb = numeric_grad(lambda x, y: float(loss_od(T(x), T(y), tm, tf).data), [sm, sf])
    assert rel_error(a.grad, na) < 1e-4 and rel_error(b.grad, nb) < 1e-4


def test_similarity_examples():
    f = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2)
    np.testing.assert_allclose(similarity_matrix(f, 1).data, np.ones((4, 4)), atol=1e-12)
    g = np.zeros((2, 1, 2))
    g[0, 0, 0] = 1.0
    g[1, 0, 1] = 1.0
    assert similarity_matrix(g).data[0, 1] == 0.0


def test_similarity_matches_oracle_both_exponents():
    rng = np.random.default_rng(4)
    for e in (1, 2):
        for _ in range(10):
            f = rng.standard_normal((4, 3, 3))
            np.testing.assert_allclose(similarity_matrix(f, e).data, naive_similarity(f, e), atol=1e-9)


def test_similarity_zero_vector_warns():
    f = np.ones((2, 2, 2))
    f[:, 0, 1] = 0.0
    with pytest.warns(RuntimeWarning):
        g = similarity_matrix(f).data
    assert np.all(g[1] == 0) and np.all(g[:, 1] == 0)
    assert g[0, 0] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100))
def test_similarity_properties(seed, s):
    f = np.random.default_rng(seed).standard_normal((3, 3, 2)) + 0.1
    g = similarity_matrix(f, 1).data
    np.testing.assert_allclose(g, g.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-12)
    assert np.all(np.abs(g) <= 1 + 1e-12)
    np.testing.assert_allclose(similarity_matrix(s * f, 1).data, g, atol=1e-9)


def test_loss_fs_examples_and_oracle():
    rng = np.random.default_rng(5)
    ft = rng.standard_normal((2, 6, 3, 3))
    assert float(loss_fs(T(ft), ft).data) == 0.0
    assert float(loss_fs(T(3.0 * ft), ft, 1).data) == pytest.approx(0.0, abs=1e-20)
    for e in (1, 2):
        fs = rng.standard_normal((2, 4, 3, 3))
        assert float(loss_fs(T(fs), ft, e).data) == pytest.approx(naive_fs(fs, ft, e), abs=1e-9)
    with pytest.raises(DimensionError):
        loss_fs(T(rng.standard_normal((2, 4, 3, 4))), ft)


def test_loss_fs_teacher_gets_no_gradient():
    rng = np.random.default_rng(6)
    fs = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    ft = Tensor(rng.standard_normal((1, 5, 2, 2)), requires_grad=True)
    loss_fs(fs, ft).backward()
    assert np.all(ft.grad == 0) and np.any(fs.grad != 0)


def fixtures(rng):
    return dict(gm=rng.random((2, 9, 4, 4)), gf=rng.standard_normal((2, 16, 4, 4)),
                sm=rng.random((2, 9, 4, 4)), sf=rng.standard_normal((2, 16, 4, 4)),
                tm=rng.random((2, 9, 4, 4)), tf=rng.standard_normal((2, 16, 4, 4)),
                fs=rng.standard_normal((2, 3, 4, 4)), ft=rng.standard_normal((2, 5, 4, 4)))


def test_total_loss_combination():
    d = fixtures(np.random.default_rng(7))
    args = (d["gm"], d["gf"], T(d["sm"]), T(d["sf"]), d["tm"], d["tf"], T(d["fs"]), d["ft"])
    mse = float(loss_mse(T(d["sm"]), T(d["sf"]), d["gm"], d["gf"]).data)
    od = float(loss_od(T(d["sm"]), T(d["sf"]), d["tm"], d["tf"]).data)
    fs = float(loss_fs(T(d["fs"]), d["ft"]).data)
    assert float(total_loss(*args, config=DistillConfig(0.0, 0.0)).data) == mse
    assert float(total_loss(*args, config=DistillConfig(0.5, 0.00005)).data) == pytest.approx(
        mse + 0.5 * od + 0.00005 * fs, abs=1e-9)
    parts = total_loss(*args, config=DistillConfig(0.5, 0.00005), breakdown=True)
    assert (parts.mse, parts.od, parts.fs) == pytest.approx((mse, od, fs))


def test_total_loss_zero_when_everything_agrees():
    d = fixtures(np.random.default_rng(8))
    v = total_loss(d["gm"], d["gf"], T(d["gm"]), T(d["gf"]), d["gm"], d["gf"], T(d["fs"]), d["fs"])
    assert float(v.data) == 0.0


def test_total_loss_monotone_in_lambdas():
    d = fixtures(np.random.default_rng(9))
    args = (d["gm"], d["gf"], T(d["sm"]), T(d["sf"]), d["tm"], d["tf"], T(d["fs"]), d["ft"])
    vals1 = [float(total_loss(*args, config=DistillConfig(l, 0.0)).data) for l in (0, 0.1, 0.5, 1, 2)]
    vals2 = [float(total_loss(*args, config=DistillConfig(0.5, l)).data) for l in (0, 1e-5, 1e-3, 0.1)]
    assert vals1 == sorted(vals1) and vals2 == sorted(vals2)


def test_total_loss_gradients_match_finite_differences():
    d = fixtures(np.random.default_rng(10))
    cfg = DistillConfig(0.5, 0.1)

    def build(sm, sf, fs):
        return total_loss(d["gm"], d["gf"], sm, sf, d["tm"], d["tf"], fs, d["ft"], cfg)

    leaves = [Tensor(d[k].copy(), requires_grad=True) for k in ("sm", "sf", "fs")]
    build(*leaves).backward()
    nums = numeric_grad(lambda a, b, c: float(build(T(a), T(b), T(c)).data), [d["sm"], d["sf"], d["fs"]])
    for leaf, num in zip(leaves, nums):
        assert rel_error(leaf.grad, num) < 1e-4
