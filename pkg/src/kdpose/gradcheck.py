"""Central finite-difference checks of every differentiable op.

Each check draws random float64 instances, computes the analytic gradient
by reverse mode and compares it with ``(f(x + h e) - f(x - h e)) / 2h``.
Small inputs are perturbed coordinate by coordinate; for the full network
objective the comparison is along random unit directions in parameter
space.

The error of one instance is ``|a - n| / max(|a|, |n|, floor)`` in the
Euclidean norm over the compared entries.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .geometry import CameraIntrinsics, Pose, random_rotation, rodrigues
from .losses import DistillConfig, loss_fs, loss_mse, loss_od, total_loss
from .network import STUDENT_SPEC, TEACHER_SPEC, build, forward
from .pnp import _jacobian, _residuals

STEP = 1e-5
RTOL = 1e-4
FLOOR = 1e-10
N_INSTANCES = 20


@dataclass
class CheckResult:
    name: str
    n_instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= RTOL


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), FLOOR))


def numeric_grad(f, arrays: list[np.ndarray], step: float = STEP) -> list[np.ndarray]:
    """Coordinate-wise central differences of the scalar ``f(*arrays)``."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = f(*arrays)
            flat[i] = keep - step
            fm = f(*arrays)
            flat[i] = keep
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(build_loss, arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build_loss(*leaves).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def check_op(name: str, build_loss, sample, n_instances: int = N_INSTANCES, seed: int = 0) -> CheckResult:
    """``build_loss`` maps Tensors to a scalar Tensor; ``sample(rng)`` draws input arrays."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0

    def f(*arrays):
        with ag.no_grad():
            return float(build_loss(*[ag.Tensor(a) for a in arrays]).data)

    for _ in range(n_instances):
        arrays = [np.asarray(a, dtype=np.float64) for a in sample(rng)]
        a = analytic_grad(build_loss, arrays)
        n = numeric_grad(f, arrays)
        worst = max(worst, rel_error(np.concatenate([x.ravel() for x in a]),
                                     np.concatenate([x.ravel() for x in n])))
    return CheckResult(name, n_instances, worst, time.perf_counter() - t0)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _projector(rng, shape):
    """A fixed random target so that ``mse(op(x), target)`` exercises every output entry."""
    return ag.Tensor(rng.standard_normal(shape))


def op_checks(n_instances: int = N_INSTANCES, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1000)
    results = []

    tgt = _projector(rng, (2, 3, 4))
    results.append(check_op("add", lambda a, b: ag.mse(ag.add(a, b), tgt),
                            lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))],
                            n_instances, seed))
    results.append(check_op("scale", lambda a: ag.mse(ag.scale(a, -1.7), tgt),
                            lambda r: [r.standard_normal((2, 3, 4))], n_instances, seed))
    results.append(check_op("sum", lambda a: ag.scale(ag.tsum(a), 0.3),
                            lambda r: [r.standard_normal((2, 3, 4))], n_instances, seed))
    results.append(check_op("relu", lambda a: ag.mse(ag.relu(a), tgt),
                            lambda r: [_away_from_zero(r, (2, 3, 4))], n_instances, seed))
    results.append(check_op("mse", lambda a, b: ag.mse(a, b),
                            lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))],
                            n_instances, seed))
    t1, t2 = _projector(rng, (2, 1, 3, 3)), _projector(rng, (2, 3, 3, 3))

    def split_loss(a):
        p, q = ag.split_channels(a, [1, 3])
        return ag.add(ag.mse(p, t1), ag.scale(ag.mse(q, t2), 2.0))

    results.append(check_op("split_channels", split_loss, lambda r: [r.standard_normal((2, 4, 3, 3))],
                            n_instances, seed))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        ho = (6 + 2 * pad - 3) // stride + 1
        tc = _projector(rng, (2, 3, ho, ho))
        results.append(check_op(
            f"conv2d(stride={stride},pad={pad})",
            lambda x, w, b, s=stride, p=pad, t=tc: ag.mse(ag.conv2d(x, w, b, s, p), t),
            lambda r: [r.standard_normal((2, 2, 6, 6)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
            n_instances, seed))
    tcp = _projector(rng, (2, 3, 4, 4))
    results.append(check_op("conv2d(1x1)", lambda x, w, b: ag.mse(ag.conv2d(x, w, b), tcp),
                            lambda r: [r.standard_normal((2, 2, 4, 4)), r.standard_normal((3, 2, 1, 1)),
                                       r.standard_normal(3)], n_instances, seed))
    for e in (1, 2):
        ts = _projector(rng, (2, 9, 9))
        results.append(check_op(f"similarity_matrix(e={e})",
                                lambda f, e=e, t=ts: ag.mse(ag.similarity_matrix(f, e), t),
                                lambda r: [r.standard_normal((2, 3, 3, 3)) + 0.5], n_instances, seed))
    gm, gf = rng.random((2, 9, 4, 4)), rng.standard_normal((2, 16, 4, 4))
    results.append(check_op("loss_mse", lambda m, f: loss_mse(m, f, gm, gf),
                            lambda r: [r.random((2, 9, 4, 4)), r.standard_normal((2, 16, 4, 4))],
                            n_instances, seed))
    results.append(check_op("loss_od", lambda m, f: loss_od(m, f, gm, gf),
                            lambda r: [r.random((2, 9, 4, 4)), r.standard_normal((2, 16, 4, 4))],
                            n_instances, seed))
    teacher_feat = rng.standard_normal((2, 5, 3, 3)) + 0.5
    for e in (1, 2):
        results.append(check_op(f"loss_fs(e={e})", lambda f, e=e: loss_fs(f, teacher_feat, e),
                                lambda r: [r.standard_normal((2, 3, 3, 3)) + 0.5], n_instances, seed))
    return results


def _relu_pattern(network, image) -> np.ndarray:
    """Signs of every ReLU input; a change between the two stencil points means a kink was crossed."""
    x = ag.Tensor(image)
    masks = []
    with ag.no_grad():
        for layer in network.layers:
            x = ag.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
            if layer.relu:
                masks.append((x.data > 0).ravel())
                x = ag.relu(x)
    return np.concatenate(masks)


def network_objective_check(n_instances: int = N_INSTANCES, seed: int = 0, resolution: int = 32,
                            config: DistillConfig = DistillConfig(0.5, 0.05)) -> CheckResult:
    """d(total loss)/d(student parameters) along random directions, through the default student.

    The feature weight here is larger than the training default so that the
    similarity term contributes visibly to the compared derivative. A
    direction whose +-h stencil flips the sign of any ReLU input is redrawn:
    the objective is not differentiable across that interval, so central
    differences say nothing about the gradient there.
    """
    rng = np.random.default_rng(seed + 2000)
    t0 = time.perf_counter()
    student = build(STUDENT_SPEC, seed, dtype=np.float64)
    teacher = build(TEACHER_SPEC, seed + 1, dtype=np.float64)
    q = resolution // 4
    image = rng.random((2, 3, resolution, resolution))
    gt_maps = rng.random((2, 9, q, q))
    gt_fields = rng.uniform(-1, 1, (2, 16, q, q))
    with ag.no_grad():
        t_maps, t_fields, t_feat = forward(teacher, image)
    params = student.parameters()

    def objective():
        maps, fields, feat = forward(student, image)
        return total_loss(gt_maps, gt_fields, maps, fields, t_maps, t_fields, feat, t_feat, config)

    worst = 0.0
    done = attempts = 0
    while done < n_instances:
        for p in params:
            p.zero_grad()
        objective().backward()
        directions = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d ** 2).sum()) for d in directions))
        directions = [d / norm for d in directions]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, directions))
        base = [p.data.copy() for p in params]
        vals, patterns = [], []
        for sign in (1, -1):
            for p, b, d in zip(params, base, directions):
                p.data[...] = b + sign * STEP * d
            with ag.no_grad():
                vals.append(float(objective().data))
            patterns.append(_relu_pattern(student, image))
        for p, b in zip(params, base):
            p.data[...] = b
        attempts += 1
        if attempts > 5 * n_instances:
            raise RuntimeError("too many stencils straddle a ReLU kink")
        if np.array_equal(*patterns):
            done += 1
            numeric = (vals[0] - vals[1]) / (2 * STEP)
            worst = max(worst, rel_error(np.array([analytic]), np.array([numeric])))
        # move to a fresh point so instances are independent
        for p in params:
            p.data += 0.01 * rng.standard_normal(p.shape)
    return CheckResult("total_loss through student", n_instances, worst, time.perf_counter() - t0)


def pnp_jacobian_check(n_instances: int = N_INSTANCES, seed: int = 0) -> CheckResult:
    """Analytic reprojection Jacobian against differences of the left-multiplied update."""
    rng = np.random.default_rng(seed + 3000)
    intr = CameraIntrinsics(140.0, 140.0, 64.0, 64.0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        pose = Pose(random_rotation(rng), np.array([0.0, 0.0, 900.0]) + rng.uniform(-50, 50, 3))
        X = rng.uniform(-150, 150, (9, 3))
        x = rng.uniform(0, 128, (9, 2))
        sw = np.sqrt(rng.uniform(0.2, 1.0, 9))
        J = _jacobian(pose, X, sw, intr)
        num = np.zeros_like(J)
        for k in range(6):
            d = np.zeros(6)
            d[k] = STEP
            rp = _residuals(Pose(rodrigues(d[:3]) @ pose.R, pose.t + d[3:]), X, x, sw, intr)
            rm = _residuals(Pose(rodrigues(-d[:3]) @ pose.R, pose.t - d[3:]), X, x, sw, intr)
            num[:, k] = (rp - rm) / (2 * STEP)
        worst = max(worst, rel_error(J, num))
    return CheckResult("pnp jacobian", n_instances, worst, time.perf_counter() - t0)


def run_suite(n_instances: int = N_INSTANCES, seed: int = 0) -> list[CheckResult]:
    return op_checks(n_instances, seed) + [network_objective_check(n_instances, seed),
                                           pnp_jacobian_check(n_instances, seed)]


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':36s} {'n':>4s} {'max rel err':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:36s} {r.n_instances:4d} {r.max_rel_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
