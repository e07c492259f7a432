from __future__ import annotations

import numpy as np
import pytest

from mfsmp.config import fixture_from_doc
from mfsmp.fixtures import example11, get_fixture
from mfsmp.measure import MomentBasis, empirical_from_samples, moment_vector
from mfsmp.problem import (
    ControlSet,
    ProblemSpec,
    constant_function,
    eval_coefficient,
    eval_derivatives,
    make_coefficient,
    validate_problem,
    zero_problem,
)


def test_example11_sigma_lipschitz_about_two(ex11):
    rep = validate_problem(ex11.spec)
    assert rep.passed
    assert 1.0 < rep.lipschitz["sigma"] <= 2.0 + 1e-9
    assert rep.to_dict()["spot_check_only"] is True


def test_zero_problem_ratios_vanish():
    rep = validate_problem(zero_problem())
    assert rep.passed
    assert rep.lipschitz == {"b": 0.0, "sigma": 0.0}


def test_cubic_drift_warns():
    rep = validate_problem(get_fixture("cubic_blowup").spec, probe_box=(-10.0, 10.0))
    assert rep.flags["bounded_b_x"] == "warn"
    assert not rep.passed


def test_example11_values(ex11):
    spec = ex11.spec
    dirac = empirical_from_samples([1.0])
    assert eval_coefficient(spec.sigma, 0.3, [1.0], dirac)[0, 0] == 0.0
    assert eval_coefficient(spec.b, 0.3, [1.0], dirac, [-1.0])[0] == -1.0


def test_constant_function_ignores_arguments():
    f = constant_function("drift", 2.5, 1, 1)
    for x, samples, v in ((0.0, [0.0], 0.0), (3.0, [-1.0, 4.0], 7.0)):
        assert eval_coefficient(f, 0.9, [x], empirical_from_samples(samples), [v])[0] == 2.5


def test_example11_sigma_derivatives(ex11):
    mu = empirical_from_samples([0.2, 1.7, 3.0])
    der = eval_derivatives(ex11.spec.sigma, 0.0, [0.4], mu, None, [1.1], [-0.3])
    assert der.f_x.ravel().tolist() == [1.0]
    assert der.f_mu.ravel().tolist() == [1.0]
    for arr in (der.f_xx, der.f_xmu, der.f_ymu, der.f_mumu):
        assert np.all(arr == 0)


def test_constant_derivatives_zero():
    f = constant_function("running_cost", 3.0, 1, 1)
    der = eval_derivatives(f, 0.0, [1.0], empirical_from_samples([0.0, 1.0]), [0.0], [2.0], [2.0])
    for arr in (der.f_x, der.f_mu, der.f_xx, der.f_xmu, der.f_ymu, der.f_mumu):
        assert np.all(arr == 0)


def test_product_x_mean_against_finite_differences():
    f = make_coefficient("terminal_cost", [("x*m", 1.0)], 1, 0)
    xi = np.array([0.5, 1.0, 2.5])
    mu = empirical_from_samples(xi)
    x, y = 0.8, 1.3
    der = eval_derivatives(f, 0.0, [x], mu, None, [y], [y])
    m = xi.mean()
    assert der.f_x[0] == pytest.approx(m)
    assert der.f_mu[0] == pytest.approx(x)
    assert der.f_xmu[0, 0] == pytest.approx(1.0)

    def value(xx, samples):
        return eval_coefficient(f, 0.0, [xx], empirical_from_samples(samples))

    eps = 1e-6
    assert (value(x + eps, xi) - value(x - eps, xi)) / (2 * eps) == pytest.approx(m, rel=1e-8)
    # shifting every atom by eps moves the mean by eps: directional Lions derivative
    fd = (value(x, xi + eps) - value(x, xi - eps)) / (2 * eps)
    assert fd == pytest.approx(der.f_mu[0], rel=1e-8)


def test_make_coefficient_shape_check():
    with pytest.raises(ValueError):
        make_coefficient("drift", [[("x", 1.0)], [("x", 1.0)]], 1, 1, shape=(1,))


def test_diffusion_may_not_depend_on_control():
    with pytest.raises(ValueError):
        make_coefficient("diffusion", [[[("v", 1.0)]]], 1, 1)


def test_degree_limit():
    with pytest.raises(ValueError):
        make_coefficient("drift", [[("x^5", 1.0)]], 1, 1)


def test_problem_shape_validation():
    base = zero_problem()
    with pytest.raises(ValueError):
        ProblemSpec(base.sigma, base.sigma, base.h, base.Phi, base.controls, base.x0, 1.0)
    with pytest.raises(ValueError):
        ProblemSpec(base.b, base.sigma, base.h, base.Phi, base.controls, base.x0, 0.0)


def test_control_set_box_grid():
    cs = ControlSet.box([-1.0], [1.0], 5)
    np.testing.assert_allclose(cs.points[:, 0], np.linspace(-1, 1, 5))
    assert cs.contains(np.array([[0.3]])) and not cs.contains(np.array([[1.5]]))


def test_moment_basis_identity_default():
    spec = fixture_from_doc(example11()).spec
    assert spec.b.basis == MomentBasis.identity(1)
    assert moment_vector(empirical_from_samples([1.0, 3.0]), spec.sigma.basis).tolist() == [2.0]
