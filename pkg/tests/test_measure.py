from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.measure import (
    EmpiricalMeasure,
    MomentBasis,
    brute_force_w2,
    empirical_from_samples,
    lions_bundle,
    moment_vector,
    wasserstein2,
)
from mfsmp.problem import make_coefficient


def test_single_atom():
    mu = empirical_from_samples([0.0])
    assert mu.size == 1 and mu.weights.tolist() == [1.0]


def test_uniform_default_weights():
    mu = empirical_from_samples([1, 1, 1])
    np.testing.assert_allclose(mu.weights, [1 / 3] * 3)


def test_weights_normalized():
    mu = empirical_from_samples([0, 2], [3, 1])
    np.testing.assert_allclose(mu.weights, [0.75, 0.25])
    np.testing.assert_allclose(mu.samples[:, 0], [0, 2])


@pytest.mark.parametrize("w", [[-1, 2], [0, 0], [np.nan, 1]])
def test_bad_weights_rejected(w):
    with pytest.raises(ValueError):
        empirical_from_samples([0, 1], w)


def test_w2_identity_and_dirac():
    mu = empirical_from_samples([0.3, -1.0, 2.0])
    assert wasserstein2(mu, mu) == 0.0
    assert wasserstein2(empirical_from_samples([0.0]), empirical_from_samples([3.0])) == pytest.approx(3.0)


def test_w2_shifted_uniform_atoms():
    a = empirical_from_samples([0, 1, 2, 3])
    b = empirical_from_samples([1, 2, 3, 4])
    assert wasserstein2(a, b) == pytest.approx(1.0, abs=1e-12)
    assert brute_force_w2(a, b) == pytest.approx(1.0, abs=1e-12)


def test_w2_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein2(empirical_from_samples(np.zeros((2, 1))), empirical_from_samples(np.zeros((2, 2))))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=2),
    st.integers(min_value=0, max_value=2**31),
)
def test_w2_matches_permutation_oracle(k, dim, seed):
    rng = np.random.default_rng(seed)
    a = empirical_from_samples(rng.normal(size=(k, dim)))
    b = empirical_from_samples(rng.normal(size=(k, dim)))
    assert abs(wasserstein2(a, b) - brute_force_w2(a, b)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_w2_symmetric_nonnegative(xs, ys):
    a, b = empirical_from_samples(xs), empirical_from_samples(ys)
    d = wasserstein2(a, b)
    assert d >= 0.0
    assert d == pytest.approx(wasserstein2(b, a), abs=1e-12)


def test_w2_weighted_1d_against_lp():
    # unequal weights: compare with the transport LP
    from scipy.optimize import linprog

    x, wx = np.array([0.0, 1.0, 4.0]), np.array([0.5, 0.3, 0.2])
    y, wy = np.array([2.0, 3.0]), np.array([0.6, 0.4])
    C = (x[:, None] - y[None]) ** 2
    A_eq = np.vstack([np.kron(np.eye(3), np.ones(2)), np.kron(np.ones(3), np.eye(2))])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([wx, wy]), bounds=(0, None))
    got = wasserstein2(empirical_from_samples(x, wx), empirical_from_samples(y, wy))
    assert got**2 == pytest.approx(res.fun, abs=1e-10)


def test_moments():
    x = MomentBasis.identity(1)
    sq = MomentBasis.from_monomials(1, [[("x^2", 1.0)]])
    both = MomentBasis.from_monomials(1, [[("x", 1.0)], [("x^2", 1.0)]])
    assert moment_vector(empirical_from_samples([2.0]), x).tolist() == [2.0]
    assert moment_vector(empirical_from_samples([0.0, 2.0]), sq).tolist() == [2.0]
    np.testing.assert_allclose(moment_vector(empirical_from_samples([1.0, 2.0, 3.0]), both), [2.0, 14 / 3])


def test_moment_basis_degree_limit():
    with pytest.raises(ValueError):
        MomentBasis.from_monomials(1, [[("x^3", 1.0)]])


def _phi(monomials, basis):
    return make_coefficient("terminal_cost", monomials, 1, 0, basis)


def test_lions_linear_functional():
    lb = lions_bundle(_phi([("m", 1.0)], MomentBasis.identity(1)))
    mu = empirical_from_samples([0.0, 5.0])
    for y in (-1.0, 0.0, 3.0):
        assert lb.d_mu(mu, [y]) == pytest.approx([1.0])
        assert np.all(lb.d2_mu(mu, [y], [0.5]) == 0)
        assert np.all(lb.dy_dmu(mu, [y]) == 0)


def test_lions_square_of_mean():
    lb = lions_bundle(_phi([("m^2", 1.0)], MomentBasis.identity(1)))
    mu = empirical_from_samples([1.0, 3.0])
    for y in (-2.0, 0.0, 7.0):
        assert lb.d_mu(mu, [y]) == pytest.approx([4.0])


def _fd_directional(phi_fn, samples, direction, eps):
    return (phi_fn(samples + eps * direction(samples)) - phi_fn(samples)) / eps


def test_lions_square_of_second_moment_fd():
    basis = MomentBasis.from_monomials(1, [[("x^2", 1.0)]])
    f = _phi([("m^2", 1.0)], basis)
    lb = lions_bundle(f)
    xi = np.array([[1.0], [2.0]])
    mu = empirical_from_samples(xi)
    for y in (-1.0, 0.5, 2.0):
        assert lb.d_mu(mu, [y]) == pytest.approx([10.0 * y])

    def value(s):
        return f(0.0, np.zeros((1, 1)), moment_vector(empirical_from_samples(s), basis))[0]

    for direction in (lambda s: np.ones_like(s), lambda s: s**2, lambda s: np.sin(s)):
        exact = np.mean([lb.d_mu(mu, s) @ direction(s) for s in xi])
        errs = [abs(_fd_directional(value, xi, direction, e) - exact) for e in (1e-2, 5e-3, 2.5e-3)]
        slope = np.polyfit(np.log([1e-2, 5e-3, 2.5e-3]), np.log(errs), 1)[0]
        assert slope >= 0.9


def test_lions_second_derivatives_fd():
    # d/de of d_mu f(mu_e, y) along a shift is E[d2_mu f(mu, xi, y) psi(xi)]
    basis = MomentBasis.from_monomials(1, [[("x", 1.0)], [("x^2", 1.0)]])
    f = _phi([("m0*m1", 1.0), ("m1^2", 0.5)], basis)
    lb = lions_bundle(f)
    xi = np.array([[0.5], [1.5], [-1.0]])
    y = np.array([0.7])
    psi = np.cos
    exact = np.mean([lb.d2_mu(empirical_from_samples(xi), s, y)[0, 0] * psi(s[0]) for s in xi])
    errs = []
    eps = np.array([1e-2, 5e-3, 2.5e-3])
    for e in eps:
        moved = empirical_from_samples(xi + e * psi(xi))
        fd = (lb.d_mu(moved, y) - lb.d_mu(empirical_from_samples(xi), y))[0] / e
        errs.append(abs(fd - exact))
    assert np.polyfit(np.log(eps), np.log(errs), 1)[0] >= 0.9
    h = 1e-5
    dy = (lb.d_mu(empirical_from_samples(xi), y + h) - lb.d_mu(empirical_from_samples(xi), y - h))[0] / (2 * h)
    assert lb.dy_dmu(empirical_from_samples(xi), y)[0, 0] == pytest.approx(dy, rel=1e-7)


def test_lions_rejects_plain_callable():
    with pytest.raises(TypeError):
        lions_bundle(lambda m: m)


def test_empirical_measure_invariants():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.5, 0.6]))
    mu = empirical_from_samples(list(itertools.repeat(1.0, 4)))
    assert mu.is_uniform and mu.mean().tolist() == [1.0]
