"""Empirical measures, the 2-Wasserstein metric and Lions derivatives.

Laws are always finitely supported particle clouds.  Lions derivatives are
available in closed form for moment-coupled functions
``f(mu) = phi(m(mu))`` with ``m_i(mu) = integral of h_i d mu`` and polynomial
``h_i`` of degree at most two:

* ``d_mu f(mu, y)          = sum_i  phi_{m_i} grad h_i(y)``
* ``d2_mu f(mu, x, y)      = sum_ij phi_{m_i m_j} grad h_i(x) (x) grad h_j(y)``
* ``d_y d_mu f(mu, y)      = sum_i  phi_{m_i} hess h_i(y)``

The derivatives are defined everywhere in ``y``, not only on the support
of ``mu``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .poly import PolyArray

MAX_ASSIGNMENT_ATOMS = 64


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted particle cloud on R^n.  ``samples`` has shape ``(N, n)``."""

    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if s.ndim != 2 or s.shape[0] != w.shape[0]:
            raise ValueError("samples and weights disagree in length")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("weights must be nonnegative and sum to 1")
        s.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted average of per-atom ``values`` (leading axis = atoms)."""
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def pushforward(self, fn: Callable[[np.ndarray], np.ndarray]) -> "EmpiricalMeasure":
        return EmpiricalMeasure(fn(self.samples), self.weights.copy())


def empirical_from_samples(samples, weights=None) -> EmpiricalMeasure:
    """Build a normalized empirical measure (uniform weights by default)."""
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample list")
    if s.ndim == 0:
        s = s.reshape(1, 1)
    elif s.ndim == 1:
        s = s[:, None]
    if weights is None:
        w = np.full(s.shape[0], 1.0 / s.shape[0])
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != s.shape[0]:
            raise ValueError("weights must match the number of samples")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("all weights are zero")
        w = w / total
    return EmpiricalMeasure(s, w)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 between two empirical measures.

    One-dimensional measures use the quantile coupling (stable sort, so
    ties keep index order).  In higher dimension both clouds must be
    uniform with the same atom count, at most ``MAX_ASSIGNMENT_ATOMS``.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return float(np.sqrt(max(_w2sq_1d(mu, nu), 0.0)))
    if mu.size != nu.size or not (mu.is_uniform and nu.is_uniform):
        raise ValueError("dim > 1 requires uniform clouds with equal atom counts")
    if mu.size > MAX_ASSIGNMENT_ATOMS:
        raise ValueError(f"dim > 1 assignment limited to {MAX_ASSIGNMENT_ATOMS} atoms")
    cost = ((mu.samples[:, None, :] - nu.samples[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def _w2sq_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    ia = np.argsort(mu.samples[:, 0], kind="stable")
    ib = np.argsort(nu.samples[:, 0], kind="stable")
    xa, wa = mu.samples[ia, 0], mu.weights[ia]
    xb, wb = nu.samples[ib, 0], nu.weights[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    # quantile functions are right-continuous step functions of the level
    qa = xa[np.minimum(np.searchsorted(ca, levels, side="left"), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, levels, side="left"), len(xb) - 1)]
    return float(np.sum(widths * (qa - qb) ** 2))


def brute_force_w2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Minimum over all permutation couplings (uniform, equal-size clouds)."""
    n = mu.size
    if nu.size != n:
        raise ValueError("permutation coupling needs equal atom counts")
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, float(((mu.samples - nu.samples[list(perm)]) ** 2).sum(axis=1).mean()))
    return float(np.sqrt(best))


class MomentBasis:
    """Moment functions ``h_1..h_k`` on R^n, each a polynomial of degree <= 2."""

    def __init__(self, polys: PolyArray):
        if len(polys.shape) != 1:
            raise ValueError("moment basis must be a vector of polynomials")
        if polys.degree > 2:
            raise ValueError("moment functions must have degree <= 2")
        self.polys = polys
        self.n = len(polys.variables)
        self.k = polys.shape[0]
        idx = list(range(self.n))
        self._grad = polys.jacobian(idx)
        self._hess = self._grad.jacobian(idx)

    @classmethod
    def from_monomials(cls, n: int, functions: Sequence[Sequence[tuple[str, float]]]) -> "MomentBasis":
        variables = state_variables(n)
        return cls(PolyArray.stack([PolyArray.from_monomials(variables, f) for f in functions]))

    @classmethod
    def identity(cls, n: int) -> "MomentBasis":
        """``h_i(x) = x_i``: the moments are the mean vector."""
        variables = state_variables(n)
        return cls(PolyArray.stack([PolyArray.from_monomials(variables, [(v, 1.0)]) for v in variables]))

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.polys(np.atleast_2d(x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Shape ``(N, k, n)``."""
        return self._grad(np.atleast_2d(x))

    def hess(self, x: np.ndarray) -> np.ndarray:
        """Shape ``(N, k, n, n)``."""
        return self._hess(np.atleast_2d(x))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MomentBasis):
            return NotImplemented
        a, b = self.polys, other.polys
        return (
            a.variables == b.variables
            and a.shape == b.shape
            and a.exps.shape == b.exps.shape
            and np.array_equal(a.exps, b.exps)
            and np.array_equal(a.coef, b.coef)
        )

    __hash__ = None  # type: ignore[assignment]


def state_variables(n: int) -> tuple[str, ...]:
    return tuple(f"x{i}" for i in range(n))


def moment_vector(mu: EmpiricalMeasure, basis: MomentBasis) -> np.ndarray:
    if basis.n != mu.dim:
        raise ValueError(f"basis acts on R^{basis.n}, measure lives on R^{mu.dim}")
    return mu.expect(basis.values(mu.samples))


@dataclass(frozen=True)
class LionsDerivativeBundle:
    d_mu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]
    d2_mu: Callable[[EmpiricalMeasure, np.ndarray, np.ndarray], np.ndarray]
    dy_dmu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]


def lions_bundle(phi, t: float = 0.0, x=None, v=None) -> LionsDerivativeBundle:
    """Closed-form Lions derivatives of a moment-coupled function.

    ``phi`` is a :class:`~mfsmp.problem.MomentCoupledFunction`; the
    non-measure arguments are frozen at ``(t, x, v)``.  Each returned
    callable accepts a single point ``y`` (shape ``(n,)``) and returns an
    array of shape ``phi.shape + (n,)`` or ``phi.shape + (n, n)``.
    """
    basis = getattr(phi, "basis", None)
    if basis is None or not hasattr(phi, "tables"):
        raise TypeError("lions_bundle needs a moment-coupled function with partial tables")
    n = basis.n
    x = np.zeros(n) if x is None else np.asarray(x, dtype=float).reshape(n)

    def _tables(mu, names):
        m = moment_vector(mu, basis)
        return phi.tables(t, x[None], m, None if v is None else np.atleast_2d(v), names)

    def d_mu(mu, y):
        tab = _tables(mu, ("phi_m",))
        g = basis.grad(np.asarray(y, dtype=float).reshape(1, n))[0]
        return np.einsum("...k,kn->...n", tab["phi_m"][0], g)

    def d2_mu(mu, xx, y):
        tab = _tables(mu, ("phi_mm",))
        gx = basis.grad(np.asarray(xx, dtype=float).reshape(1, n))[0]
        gy = basis.grad(np.asarray(y, dtype=float).reshape(1, n))[0]
        return np.einsum("...ij,ia,jb->...ab", tab["phi_mm"][0], gx, gy)

    def dy_dmu(mu, y):
        tab = _tables(mu, ("phi_m",))
        hy = basis.hess(np.asarray(y, dtype=float).reshape(1, n))[0]
        return np.einsum("...k,kab->...ab", tab["phi_m"][0], hy)

    return LionsDerivativeBundle(d_mu, d2_mu, dy_dmu)
