"""Control problem definitions: coefficients, control sets, spot validation.

Every coefficient ``f(t, x, mu, v) = phi(t, x, m(mu), v)`` is a polynomial
body ``phi`` in the variables ``t, x0.., m0.., v0..`` composed with the
moment vector ``m(mu)`` of a :class:`~mfsmp.measure.MomentBasis`.  All partial
derivatives are exact polynomial tables built once at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .measure import EmpiricalMeasure, MomentBasis, empirical_from_samples, moment_vector, wasserstein2
from .poly import PolyArray

KINDS = ("drift", "diffusion", "running_cost", "terminal_cost")
MAX_DEGREE = 4

TABLE_NAMES = ("phi", "phi_x", "phi_m", "phi_v", "phi_xx", "phi_xm", "phi_mm")


def body_variables(n: int, k: int, kc: int) -> tuple[str, ...]:
    return ("t",) + tuple(f"x{i}" for i in range(n)) + tuple(f"m{i}" for i in range(k)) + tuple(f"v{i}" for i in range(kc))


class MomentCoupledFunction:
    """Coefficient ``phi(t, x, m(mu), v)`` with closed-form partial tables.

    Parameters
    ----------
    kind : str
        One of ``drift``, ``diffusion``, ``running_cost``, ``terminal_cost``.
    body : PolyArray
        Polynomial over :func:`body_variables` ``(n, basis.k, kc)``.
    basis : MomentBasis
        Moment functions defining ``m(mu)``.
    n, kc : int
        State and control dimensions.
    """

    def __init__(self, kind: str, body: PolyArray, basis: MomentBasis, n: int, kc: int):
        if kind not in KINDS:
            raise ValueError(f"unknown coefficient kind {kind!r}")
        if basis.n != n:
            raise ValueError("moment basis dimension differs from the state dimension")
        expected = body_variables(n, basis.k, kc)
        if body.variables != expected:
            raise ValueError(f"body variables {body.variables} != {expected}")
        if body.degree > MAX_DEGREE:
            raise ValueError(f"body degree {body.degree} exceeds {MAX_DEGREE}")
        self.kind = kind
        self.body = body
        self.basis = basis
        self.n = n
        self.k = basis.k
        self.kc = kc
        self.shape = body.shape
        self.x_idx = list(range(1, 1 + n))
        self.m_idx = list(range(1 + n, 1 + n + self.k))
        self.v_idx = list(range(1 + n + self.k, 1 + n + self.k + kc))
        if kind in ("diffusion", "terminal_cost") and body.depends_on(self.v_idx):
            raise ValueError(f"{kind} must not depend on the control")
        phi_x = body.jacobian(self.x_idx)
        phi_m = body.jacobian(self.m_idx)
        self._tables = {
            "phi": body,
            "phi_x": phi_x,
            "phi_m": phi_m,
            "phi_v": body.jacobian(self.v_idx),
            "phi_xx": phi_x.jacobian(self.x_idx),
            "phi_xm": phi_x.jacobian(self.m_idx),
            "phi_mm": phi_m.jacobian(self.m_idx),
        }

    def __repr__(self) -> str:
        return f"MomentCoupledFunction({self.kind}, shape={self.shape}, terms={self.body.exps.shape[0]})"

    @property
    def is_zero(self) -> bool:
        return self.body.exps.shape[0] == 0

    def depends_on_measure(self) -> bool:
        return self.body.depends_on(self.m_idx)

    def table(self, name: str) -> PolyArray:
        try:
            return self._tables[name]
        except KeyError:
            raise KeyError(f"missing partial table {name!r}") from None

    def points(self, t, x, m, v=None) -> np.ndarray:
        """Stack arguments into the body's variable layout, shape ``(N, V)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n_pts = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (n_pts, 1))
        m = np.asarray(m, dtype=float)
        m = np.broadcast_to(m.reshape(-1, self.k) if m.ndim > 1 else m.reshape(1, self.k), (n_pts, self.k))
        if self.kc:
            if v is None:
                if self.body.depends_on(self.v_idx):
                    raise ValueError(f"{self.kind} needs a control value")
                v = np.zeros((n_pts, self.kc))
            v = np.asarray(v, dtype=float)
            v = np.broadcast_to(v.reshape(-1, self.kc), (n_pts, self.kc))
        else:
            v = np.zeros((n_pts, 0))
        return np.concatenate([t, x, m, v], axis=1)

    def tables(self, t, x, m, v=None, names: Iterable[str] = TABLE_NAMES) -> dict[str, np.ndarray]:
        z = self.points(t, x, m, v)
        return {name: self.table(name)(z) for name in names}

    def __call__(self, t, x, m, v=None) -> np.ndarray:
        return self.body(self.points(t, x, m, v))


@dataclass(frozen=True)
class ControlSet:
    """Finite control set, or a box with a finite evaluation grid."""

    kind: str
    points: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise ValueError("control set must be nonempty")
        if self.kind not in ("finite", "box"):
            raise ValueError(f"unknown control set kind {self.kind!r}")
        object.__setattr__(self, "points", pts)
        if self.kind == "box":
            lo = np.asarray(self.lo, dtype=float).reshape(-1)
            hi = np.asarray(self.hi, dtype=float).reshape(-1)
            if np.any(lo > hi) or lo.shape[0] != pts.shape[1]:
                raise ValueError("bad box bounds")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)

    @classmethod
    def finite(cls, points) -> "ControlSet":
        return cls("finite", np.asarray(points, dtype=float))

    @classmethod
    def box(cls, lo, hi, grid: int = 5) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        axes = [np.linspace(a, b, grid) for a, b in zip(lo, hi)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.shape[0])
        return cls("box", mesh, lo, hi)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def contains(self, values: np.ndarray, atol: float = 1e-12) -> bool:
        vals = np.asarray(values, dtype=float).reshape(-1, self.dim)
        if self.kind == "box":
            return bool(np.all(vals >= self.lo - atol) and np.all(vals <= self.hi + atol))
        dist = np.abs(vals[:, None, :] - self.points[None, :, :]).max(axis=2).min(axis=1)
        return bool(np.all(dist <= atol))

    def with_points(self, points) -> "ControlSet":
        return ControlSet(self.kind, np.asarray(points, dtype=float), self.lo, self.hi)


@dataclass(frozen=True)
class ProblemSpec:
    """The tuple (b, sigma, h, Phi, U, x0, T)."""

    b: MomentCoupledFunction
    sigma: MomentCoupledFunction
    h: MomentCoupledFunction
    Phi: MomentCoupledFunction
    controls: ControlSet
    x0: np.ndarray
    T: float
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        object.__setattr__(self, "x0", x0)
        n = x0.shape[0]
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.b.kind != "drift" or self.sigma.kind != "diffusion":
            raise ValueError("b must be a drift and sigma a diffusion")
        if self.h.kind != "running_cost" or self.Phi.kind != "terminal_cost":
            raise ValueError("h must be a running cost and Phi a terminal cost")
        if self.b.shape != (n,):
            raise ValueError(f"drift shape {self.b.shape} != ({n},)")
        if len(self.sigma.shape) != 2 or self.sigma.shape[0] != n:
            raise ValueError(f"diffusion shape {self.sigma.shape} is not ({n}, d)")
        if self.h.shape != () or self.Phi.shape != ():
            raise ValueError("costs must be scalar")
        for f in (self.b, self.sigma, self.h, self.Phi):
            if f.n != n or f.kc != self.controls.dim:
                raise ValueError(f"{f.kind} dimensions disagree with the problem")

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def d(self) -> int:
        return self.sigma.shape[1]

    @property
    def kc(self) -> int:
        return self.controls.dim

    @property
    def coefficients(self) -> dict[str, MomentCoupledFunction]:
        return {"b": self.b, "sigma": self.sigma, "h": self.h, "Phi": self.Phi}


def make_coefficient(kind, components, n, kc, basis: MomentBasis | None = None, shape=None) -> MomentCoupledFunction:
    """Build a coefficient from nested monomial lists.

    ``components`` is a list of ``(vars, coeff)`` pairs for scalar output, a
    list of such lists for vector output, or a list of rows for matrix output.
    """
    basis = basis if basis is not None else MomentBasis.identity(n)
    variables = body_variables(n, basis.k, kc)

    def build(node, depth):
        if depth == 0:
            return PolyArray.from_monomials(variables, node)
        return PolyArray.stack([build(c, depth - 1) for c in node])

    depth = {"drift": 1, "diffusion": 2, "running_cost": 0, "terminal_cost": 0}[kind]
    body = build(components, depth)
    if shape is not None and body.shape != tuple(shape):
        raise ValueError(f"{kind} shape {body.shape} != {tuple(shape)}")
    return MomentCoupledFunction(kind, body, basis, n, kc)


def eval_coefficient(f: MomentCoupledFunction, t: float, x, mu: EmpiricalMeasure, v=None) -> np.ndarray:
    m = moment_vector(mu, f.basis)
    out = f(t, np.asarray(x, dtype=float).reshape(1, f.n), m, None if v is None else np.atleast_2d(v))[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite {f.kind} value at t={t}, x={x}")
    return out


@dataclass(frozen=True)
class DerivativeBundle:
    """First and second derivatives of a coefficient at one point.

    Measure derivatives carry the copy-variable points ``y`` (and ``ybar``)
    on trailing axes: ``f_mu`` is ``shape + (n,)``, ``f_xmu`` is
    ``shape + (n_x, n_y)``, ``f_mumu`` is ``shape + (n_y, n_ybar)``.
    """

    f_x: np.ndarray
    f_mu: np.ndarray
    f_xx: np.ndarray
    f_xmu: np.ndarray
    f_ymu: np.ndarray
    f_mumu: np.ndarray


def eval_derivatives(f: MomentCoupledFunction, t, x, mu: EmpiricalMeasure, v, y, ybar) -> DerivativeBundle:
    m = moment_vector(mu, f.basis)
    tab = f.tables(t, np.asarray(x, dtype=float).reshape(1, f.n), m, None if v is None else np.atleast_2d(v))
    tab = {k: val[0] for k, val in tab.items()}
    gy = f.basis.grad(np.asarray(y, dtype=float).reshape(1, f.n))[0]
    gyb = f.basis.grad(np.asarray(ybar, dtype=float).reshape(1, f.n))[0]
    hy = f.basis.hess(np.asarray(y, dtype=float).reshape(1, f.n))[0]
    return DerivativeBundle(
        f_x=tab["phi_x"],
        f_mu=np.einsum("...k,kn->...n", tab["phi_m"], gy),
        f_xx=tab["phi_xx"],
        f_xmu=np.einsum("...ak,kb->...ab", tab["phi_xm"], gy),
        f_ymu=np.einsum("...k,kab->...ab", tab["phi_m"], hy),
        f_mumu=np.einsum("...ij,ia,jb->...ab", tab["phi_mm"], gy, gyb),
    )


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_problem`.  This is a spot check only."""

    lipschitz: dict[str, float]
    derivative_max: dict[str, float]
    flags: dict[str, str]
    probe_count: int
    probe_box: tuple[float, float]
    spot_check_only: bool = True

    @property
    def passed(self) -> bool:
        return all(flag == "pass" for flag in self.flags.values())

    def to_dict(self) -> dict:
        return {
            "lipschitz": self.lipschitz,
            "derivative_max": self.derivative_max,
            "flags": self.flags,
            "probe_count": self.probe_count,
            "probe_box": list(self.probe_box),
            "spot_check_only": self.spot_check_only,
            "disclaimer": "sampled probes only; global Lipschitz and boundedness are not certified",
            "passed": self.passed,
        }


def validate_problem(
    spec: ProblemSpec,
    probe_count: int = 200,
    probe_box: tuple[float, float] = (-2.0, 2.0),
    lipschitz_threshold: float = 10.0,
    derivative_threshold: float = 100.0,
    atoms: int = 8,
    seed: int = 0,
) -> ValidationReport:
    """Sample ``probe_count`` probes and estimate Lipschitz ratios and derivative sizes.

    The Lipschitz ratio of ``b`` and ``sigma`` is
    ``|f(t,x,mu,v) - f(t,x',mu',v)| / max(|x - x'|, W2(mu, mu'))`` where
    ``mu'`` is ``mu`` shifted by a random vector, so ``W2(mu, mu')`` equals the
    shift length.  Derivative magnitudes are the largest Frobenius norms of
    ``f_x`` and ``f_mu`` over the probes.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = probe_box
    n = spec.n
    lip = {"b": 0.0, "sigma": 0.0}
    dmax = {f"{name}_{part}": 0.0 for name in ("b", "sigma", "h", "Phi") for part in ("x", "mu")}
    for _ in range(probe_count):
        t = rng.uniform(0.0, spec.T)
        x = rng.uniform(lo, hi, size=n)
        cloud = rng.uniform(lo, hi, size=(atoms, n))
        mu = empirical_from_samples(cloud)
        v = spec.controls.points[rng.integers(spec.controls.points.shape[0])]
        delta = rng.uniform(0.05, 0.5)
        sx = rng.choice([-1.0, 1.0], size=n) * delta
        sm = rng.choice([-1.0, 1.0], size=n) * delta
        x2 = x + sx
        mu2 = empirical_from_samples(cloud + sm)
        dist = max(np.abs(sx).max(), wasserstein2(mu, mu2)) if n == 1 else max(np.abs(sx).max(), np.linalg.norm(sm))
        for name in ("b", "sigma"):
            f = spec.coefficients[name]
            a = eval_coefficient(f, t, x, mu, v)
            b = eval_coefficient(f, t, x2, mu2, v)
            lip[name] = max(lip[name], float(np.linalg.norm(a - b) / dist))
        y = cloud[rng.integers(atoms)]
        for name, f in spec.coefficients.items():
            der = eval_derivatives(f, t, x, mu, v, y, y)
            for part, arr in (("x", der.f_x), ("mu", der.f_mu)):
                if not np.all(np.isfinite(arr)):
                    raise FloatingPointError(f"non-finite derivative of {name} at probe")
                key = f"{name}_{part}"
                dmax[key] = max(dmax[key], float(np.linalg.norm(arr)))
    flags = {f"lipschitz_{k}": "pass" if val <= lipschitz_threshold else "warn" for k, val in lip.items()}
    for key in ("b_x", "b_mu", "sigma_x", "sigma_mu"):
        flags[f"bounded_{key}"] = "pass" if dmax[key] <= derivative_threshold else "warn"
    return ValidationReport(lip, dmax, flags, probe_count, (lo, hi))


def constant_function(kind: str, value, n: int, kc: int, d: int = 1) -> MomentCoupledFunction:
    """Coefficient that is identically ``value`` (broadcast to the kind's shape)."""
    shape = {"drift": (n,), "diffusion": (n, d), "running_cost": (), "terminal_cost": ()}[kind]
    basis = MomentBasis.identity(n)
    variables = body_variables(n, basis.k, kc)
    body = PolyArray.constant(variables, np.broadcast_to(np.asarray(value, dtype=float), shape)).simplify()
    return MomentCoupledFunction(kind, body, basis, n, kc)


def zero_problem(n: int = 1, d: int = 1, kc: int = 1, x0: Sequence[float] | None = None, T: float = 1.0) -> ProblemSpec:
    return ProblemSpec(
        b=constant_function("drift", 0.0, n, kc),
        sigma=constant_function("diffusion", 0.0, n, kc, d),
        h=constant_function("running_cost", 0.0, n, kc),
        Phi=constant_function("terminal_cost", 0.0, n, kc),
        controls=ControlSet.finite(np.zeros((1, kc))),
        x0=np.zeros(n) if x0 is None else np.asarray(x0, dtype=float),
        T=T,
        name="zero",
    )
