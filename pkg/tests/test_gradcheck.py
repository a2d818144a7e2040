import numpy as np
import pytest

from kdpose import autograd as ag
from kdpose.gradcheck import (RTOL, CheckResult, check_op, format_results, network_objective_check,
                              numeric_grad, op_checks, pnp_jacobian_check, rel_error)


def test_rel_error_definition():
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert rel_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


def test_numeric_grad_of_cubic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda a: float((a ** 3).sum()), [x])[0]
    np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)


def test_check_op_flags_a_wrong_backward():
    def doubled_backward_square(a):
        # forward a**2 but backward claims 4a instead of 2a
        return ag._result(a.data ** 2, "bad_square", (a,), lambda g, x=a.data: (4 * x * g,))

    bad = check_op("bad", lambda a: ag.tsum(doubled_backward_square(a)), lambda r: [r.standard_normal(4)], 3)
    assert not bad.passed and bad.max_rel_error == pytest.approx(0.5, rel=1e-6)
    good = check_op("good", lambda a: ag.tsum(ag.scale(a, 2.0)), lambda r: [r.standard_normal(4)], 3)
    assert good.passed


def test_all_op_checks_pass():
    results = op_checks(n_instances=3)
    assert len(results) >= 15
    assert all(r.passed for r in results), format_results(results)


def test_network_and_pnp_checks_pass():
    net = network_objective_check(n_instances=2, resolution=16)
    pnp = pnp_jacobian_check(n_instances=3)
    assert net.passed and pnp.passed and net.max_rel_error <= RTOL


def test_format_marks_failures():
    text = format_results([CheckResult("x", 1, 1.0, 0.0), CheckResult("y", 1, 0.0, 0.0)])
    assert "FAIL" in text.splitlines()[1] and text.splitlines()[2].endswith("ok")
