"""Regression Monte Carlo for the first- and second-order mean-field adjoint equations.

Both solvers sweep backward on the forward grid.  At step ``m`` the
conditional expectation given ``F_m`` is a ridge regression on polynomial
features of ``X_m``; the martingale integrand is the regression of
``(Y_{m+1} - E[Y_{m+1} | F_m]) dB_m / dt``, which has lower variance than
regressing ``Y_{m+1} dB_m / dt`` and returns exactly zero for deterministic
``Y``.  The value update is a theta-scheme (``theta = 1/2`` by default)
solved by a few fixed-point sweeps.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from ._copies import CloudTables, Copies
from .forward import ParticlePathEnsemble
from .measure import empirical_from_samples
from .poly import _monomials
from .problem import ProblemSpec, eval_derivatives

DEFAULT_RIDGE = 1e-8


class RegressionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """All monomials of the state up to ``degree`` (constant first) with ridge ``ridge``."""

    n: int
    degree: int = 2
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self) -> None:
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")

    @property
    def exponents(self) -> np.ndarray:
        rows = []
        for deg in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(self.n), deg):
                row = np.zeros(self.n, dtype=np.int64)
                for i in combo:
                    row[i] += 1
                rows.append(row)
        return np.array(rows)

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        return _monomials(np.atleast_2d(np.asarray(x, dtype=float)), self.exponents)


class Regressor:
    """Ridge projector for one design, reusable across target blocks.

    The intercept is unpenalized; the penalty acts on centered features as
    ``(Ac^T Ac / N + ridge I) beta = Ac^T yc / N``.
    """

    def __init__(self, states: np.ndarray, basis: RegressionBasis):
        A = basis.features(states)
        N, F = A.shape
        if N < 10 * F:
            raise RegressionError(f"{N} samples is fewer than 10 x {F} features")
        self.basis = basis
        self.A = A
        self.mean = A[:, 1:].mean(axis=0)
        Ac = A[:, 1:] - self.mean
        if F == 1:
            self._solve = lambda yc: np.zeros((0, yc.shape[1]))
        elif basis.ridge == 0.0:
            if np.linalg.matrix_rank(Ac) < F - 1:
                raise RegressionError("rank-deficient regression design; use a positive ridge")
            self._solve = lambda yc: np.linalg.lstsq(Ac, yc, rcond=None)[0]
        else:
            aug = np.vstack([Ac, np.sqrt(basis.ridge * N) * np.eye(F - 1)])
            Qm, R = np.linalg.qr(aug)
            Qn = Qm[:N]
            self._solve = lambda yc: np.linalg.solve(R, Qn.T @ yc)

    def fit(self, targets: np.ndarray) -> "RegressionFit":
        y = np.asarray(targets, dtype=float)
        flat = y.reshape(y.shape[0], -1)
        ybar = flat.mean(axis=0)
        beta = self._solve(flat - ybar)
        coef = np.vstack([ybar - self.mean @ beta, beta])
        fitted = (self.A @ coef).reshape(y.shape)
        return RegressionFit(coef, fitted, self.basis, y.shape[1:])


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    fitted: np.ndarray
    basis: RegressionBasis
    target_shape: tuple = ()

    def predict(self, states: np.ndarray) -> np.ndarray:
        out = self.basis.features(states) @ self.coef
        return out.reshape((out.shape[0],) + tuple(self.target_shape))


def regress_conditional(targets: np.ndarray, states: np.ndarray, basis: RegressionBasis | None = None) -> RegressionFit:
    """Ridge least squares of ``targets (N, r)`` on features of ``states (N, n)``."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    basis = basis or RegressionBasis(states.shape[1])
    return Regressor(states, basis).fit(targets)


@dataclass
class AdjointSolution:
    """Adjoint paths.  ``P`` and ``Q`` are ``None`` until the second-order sweep runs."""

    p: np.ndarray
    q: np.ndarray
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _resolve(spec, ens, basis, copies):
    basis = basis or RegressionBasis(spec.n)
    copies = copies or Copies()
    return basis, copies


def _check_finite(arr, what, m):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} at step {m}")


def _mf_first(tab: CloudTables, weights: np.ndarray, copies: Copies) -> np.ndarray:
    """``sum_i E~[weights_i] grad h_i(X_j)`` for per-particle ``weights (N, k)``."""
    w = np.broadcast_to(copies.tilde(weights), weights.shape)
    return np.einsum("ji,jic->jc", w, tab.gh)


def first_order_terminal(spec: ProblemSpec, x: np.ndarray, T: float, copies: Copies) -> np.ndarray:
    tab = CloudTables(spec.Phi, T, x, None, names=("phi_x", "phi_m"))
    return tab["phi_x"] + _mf_first(tab, tab["phi_m"], copies)


def solve_first_order(
    spec: ProblemSpec,
    ens: ParticlePathEnsemble,
    basis: RegressionBasis | None = None,
    copies: Copies | None = None,
    theta: float = 0.5,
    sweeps: int = 3,
) -> AdjointSolution:
    """Backward sweep for ``(p, q)``; ``p`` is ``(M+1, N, n)``, ``q`` is ``(M, N, n, d)``."""
    basis, copies = _resolve(spec, ens, basis, copies)
    grid = ens.grid
    M, N, n, d = grid.M, ens.N, spec.n, spec.d
    dt = grid.dt
    p = np.empty((M + 1, N, n))
    q = np.empty((M, N, n, d))
    p[M] = first_order_terminal(spec, ens.paths[M], grid.T, copies)
    _check_finite(p[M], "terminal p", M)
    resid = np.zeros(M)
    mart = np.zeros((M, 2))
    names = ("phi_x", "phi_m")
    for m in range(M - 1, -1, -1):
        t, x, u = grid.time(m), ens.paths[m], ens.controls[m]
        B = CloudTables(spec.b, t, x, u, names=names)
        S = CloudTables(spec.sigma, t, x, None, names=names)
        H = CloudTables(spec.h, t, x, u, names=names)
        reg = Regressor(x, basis)
        y = p[m + 1]
        yhat = reg.fit(y).fitted
        dev = y - yhat
        q[m] = reg.fit(dev[:, :, None] * ens.noise[m][:, None, :] / dt).fitted
        qm = q[m]
        base = np.einsum("jarc,jar->jc", S["phi_x"], qm) + H["phi_x"]
        base = base + _mf_first(S, np.einsum("jari,jar->ji", S["phi_m"], qm), copies)
        base = base + _mf_first(H, H["phi_m"], copies)

        def driver(pp):
            out = base + np.einsum("jac,ja->jc", B["phi_x"], pp)
            return out + _mf_first(B, np.einsum("jai,ja->ji", B["phi_m"], pp), copies)

        f0 = driver(yhat)
        cur = yhat + dt * f0
        for _ in range(sweeps):
            cur = yhat + dt * ((1 - theta) * f0 + theta * driver(cur))
        _check_finite(cur, "p", m)
        p[m] = cur
        resid[m] = float(np.sqrt(np.mean(dev**2)))
        mart[m] = dev.mean(), dev.std(ddof=1) / np.sqrt(N) if N > 1 else 0.0
    diag = {"first_residual_rms": resid, "first_martingale_mean_se": mart, "theta": theta, "copy_mode": copies.mode}
    return AdjointSolution(p, q, diagnostics=diag)


# --- second order ----------------------------------------------------------------


def _bc(a, like_rows):
    return np.broadcast_to(a, (like_rows,) + a.shape[1:])


def second_order_terminal(spec: ProblemSpec, x: np.ndarray, T: float, copies: Copies) -> np.ndarray:
    """``Phi_xx + 2 E~[Phi_xmu] + E~E-[Phi_mumu] + E~[Phi_ymu]`` on the terminal cloud."""
    tab = CloudTables(spec.Phi, T, x, None, names=("phi_m", "phi_xx", "phi_xm", "phi_mm"))
    N = x.shape[0]
    gt = _bc(copies.tilde(tab.gh), N)
    gb = _bc(copies.bar(tab.gh), N)
    ht = _bc(copies.tilde(tab.hh), N)
    out = tab["phi_xx"] + 2.0 * np.einsum("jai,jib->jab", tab["phi_xm"], gt)
    out = out + np.einsum("jil,jia,jlb->jab", tab["phi_mm"], gt, gb)
    return out + np.einsum("ji,jiab->jab", tab["phi_m"], ht)


def _hamiltonian_parts(tab: CloudTables, kind: str, p, q):
    """Contract a coefficient's tables with the adjoint weights of the Hamiltonian."""
    if kind == "b":
        return {name: np.einsum("ja...,ja->j...", tab[name], p) for name in ("phi_m", "phi_xx", "phi_xm", "phi_mm")}
    if kind == "sigma":
        return {name: np.einsum("jar...,jar->j...", tab[name], q) for name in ("phi_m", "phi_xx", "phi_xm", "phi_mm")}
    return {name: tab[name] for name in ("phi_m", "phi_xx", "phi_xm", "phi_mm")}


def _second_order_constant(spec, tabs, p, q, copies, N):
    """``H_xx + E~E-[H_mumu] + E~[H_ymu] + 2 E~[H_xmu]`` with the copy in the x slot."""
    out = 0.0
    for kind, tab in tabs.items():
        parts = _hamiltonian_parts(tab, kind, p, q)
        out = out + parts["phi_xx"]
        hm = _bc(copies.tilde(parts["phi_m"]), N)
        hxm = _bc(copies.tilde(parts["phi_xm"]), N)
        hmm = _bc(copies.tilde(parts["phi_mm"]), N)
        gbar = _bc(copies.bar(tab.gh), N)
        out = out + np.einsum("ji,jiab->jab", hm, tab.hh)
        out = out + 2.0 * np.einsum("jci,jie->jce", hxm, tab.gh)
        out = out + np.einsum("jil,jia,jlb->jab", hmm, gbar, tab.gh)
    return out


def _transpose(a):
    return np.swapaxes(a, -1, -2)


def solve_second_order(
    spec: ProblemSpec,
    ens: ParticlePathEnsemble,
    first: AdjointSolution,
    basis: RegressionBasis | None = None,
    copies: Copies | None = None,
    theta: float = 0.5,
    sweeps: int = 3,
    strict: bool = False,
) -> AdjointSolution:
    """Backward sweep for the matrix pair ``(P, Q)``.

    ``strict`` uses ``P sigma_x`` for the duplicated driver term instead of
    the default ``Q sigma_x``.  The returned solution carries ``p, q`` from
    ``first`` and adds ``P (M+1, N, n, n)``, ``Q (M, N, n, n, d)``; the
    asymmetry of each update before symmetrization is in
    ``diagnostics["asymmetry"]``.
    """
    basis, copies = _resolve(spec, ens, basis, copies)
    grid = ens.grid
    M, N, n, d = grid.M, ens.N, spec.n, spec.d
    dt = grid.dt
    P = np.empty((M + 1, N, n, n))
    Q = np.empty((M, N, n, n, d))
    asym = np.zeros(M + 1)
    term = second_order_terminal(spec, ens.paths[M], grid.T, copies)
    asym[M] = float(np.max(np.abs(term - _transpose(term)))) if N else 0.0
    P[M] = 0.5 * (term + _transpose(term))
    _check_finite(P[M], "terminal P", M)
    resid = np.zeros(M)
    names = ("phi_x", "phi_m", "phi_xx", "phi_xm", "phi_mm")
    for m in range(M - 1, -1, -1):
        t, x, u = grid.time(m), ens.paths[m], ens.controls[m]
        tabs = {
            "b": CloudTables(spec.b, t, x, u, names=names),
            "sigma": CloudTables(spec.sigma, t, x, None, names=names),
            "h": CloudTables(spec.h, t, x, u, names=names),
        }
        B, S = tabs["b"], tabs["sigma"]
        Ab = B["phi_x"] + np.einsum("jai,jic->jac", _bc(copies.tilde(B["phi_m"]), N), B.gh)
        Sx = np.transpose(S["phi_x"], (0, 2, 1, 3))
        Sm = np.einsum("jari,jic->jrac", _bc(copies.tilde(S["phi_m"]), N), S.gh)
        Sf = Sx + Sm
        const = _second_order_constant(spec, tabs, first.p[m], first.q[m], copies, N)
        reg = Regressor(x, basis)
        y = P[m + 1]
        yhat = reg.fit(y).fitted
        dev = y - yhat
        Qm = reg.fit(dev[..., None] * ens.noise[m][:, None, None, :] / dt).fitted
        Q[m] = Qm
        Qr = np.moveaxis(Qm, -1, 1)  # (N, d, n, n)
        qterm = np.einsum("jrba,jrbc->jac", Sx, Qr) + np.einsum("jrab,jrbc->jac", Qr, Sm) + np.einsum("jrba,jrbc->jac", Sm, Qr)
        if not strict:
            qterm = qterm + np.einsum("jrab,jrbc->jac", Qr, Sx)
        base = const + qterm

        def driver(PP):
            out = base + _transpose(Ab) @ PP + PP @ Ab
            out = out + np.einsum("jrba,jbc,jrcd->jad", Sf, PP, Sf)
            if strict:
                out = out + np.einsum("jab,jrbc->jac", PP, Sx)
            return out

        f0 = driver(yhat)
        cur = yhat + dt * f0
        for _ in range(sweeps):
            cur = yhat + dt * ((1 - theta) * f0 + theta * driver(cur))
        _check_finite(cur, "P", m)
        asym[m] = float(np.max(np.abs(cur - _transpose(cur))))
        P[m] = 0.5 * (cur + _transpose(cur))
        resid[m] = float(np.sqrt(np.mean(dev**2)))
    diag = dict(first.diagnostics)
    diag.update({"second_residual_rms": resid, "asymmetry": asym, "strict": strict})
    return AdjointSolution(first.p, first.q, P, Q, diag)


def solve_adjoints(spec, ens, basis=None, copies=None, theta=0.5, strict=False) -> AdjointSolution:
    first = solve_first_order(spec, ens, basis, copies, theta)
    return solve_second_order(spec, ens, first, basis, copies, theta, strict=strict)


# --- deterministic oracle ------------------------------------------------------------


def second_order_ode_oracle(spec: ProblemSpec, x, u, times, p=None, q=None, strict: bool = False):
    """``P`` along a constant path ``X = x`` with ``Q = 0``, by adaptive Runge-Kutta.

    All coefficients are frozen at the Dirac law of ``x`` and the control
    ``u``; ``p`` and ``q`` (default zero) enter the Hamiltonian terms.  Only
    meaningful when the forward path is deterministic and constant.
    Returns ``P`` at ``times`` with shape ``(len(times), n, n)``.
    """
    n, d = spec.n, spec.d
    x = np.asarray(x, dtype=float).reshape(n)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    p = np.zeros(n) if p is None else np.asarray(p, dtype=float)
    q = np.zeros((n, d)) if q is None else np.asarray(q, dtype=float)
    mu = empirical_from_samples(x[None])

    def der(f, t, v):
        return eval_derivatives(f, t, x, mu, v, x, x)

    def coeffs(t):
        db, ds, dh = der(spec.b, t, u), der(spec.sigma, t, None), der(spec.h, t, u)
        A = db.f_x + db.f_mu
        Sx = np.transpose(ds.f_x, (1, 0, 2))
        Sf = Sx + np.transpose(ds.f_mu, (1, 0, 2))
        H = (
            np.einsum("a...,a->...", db.f_xx + db.f_mumu + db.f_ymu + 2 * db.f_xmu, p)
            + np.einsum("ar...,ar->...", ds.f_xx + ds.f_mumu + ds.f_ymu + 2 * ds.f_xmu, q)
            + dh.f_xx + dh.f_mumu + dh.f_ymu + 2 * dh.f_xmu
        )
        return A, Sx, Sf, H

    def rhs(t, y):
        Pm = y.reshape(n, n)
        A, Sx, Sf, H = coeffs(t)
        out = A.T @ Pm + Pm @ A + np.einsum("rba,bc,rcd->ad", Sf, Pm, Sf) + H
        if strict:
            out = out + Pm @ Sx.sum(axis=0)
        return -out.ravel()

    dphi = der(spec.Phi, spec.T, None)
    PT = dphi.f_xx + 2 * dphi.f_xmu + dphi.f_mumu + dphi.f_ymu
    PT = 0.5 * (PT + PT.T)
    times = np.asarray(times, dtype=float)
    order = np.argsort(-times)
    sol = solve_ivp(rhs, (spec.T, float(times.min())), PT.ravel(), t_eval=times[order], rtol=1e-11, atol=1e-12, method="DOP853")
    if not sol.success:
        raise RuntimeError(f"oracle integration failed: {sol.message}")
    out = np.empty((times.shape[0], n, n))
    out[order] = sol.y.T.reshape(-1, n, n)
    return out


# --- CSV dump ---------------------------------------------------------------------

ADJOINT_HEADER = ("step", "time", "particle", "block", "row", "col", "value")


def write_adjoint_csv(sol: AdjointSolution, grid, path, particles: int | None = None) -> Path:
    """Dump ``p, q, P, Q``; ``Q``'s column index is ``col * d + r``."""
    path = Path(path)
    knots = grid.knots
    blocks = [("p", sol.p[..., None]), ("q", sol.q)]
    if sol.P is not None:
        blocks += [("P", sol.P), ("Q", sol.Q.reshape(sol.Q.shape[:3] + (-1,)))]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(ADJOINT_HEADER) + "\n")
        for name, arr in blocks:
            if particles is not None:
                arr = arr[:, :particles]
            idx = np.indices(arr.shape).reshape(4, -1).T
            vals = arr.ravel().tolist()
            fh.writelines(
                f"{s},{knots[s]!r},{j},{name},{a},{c},{v!r}\n" for (s, j, a, c), v in zip(idx.tolist(), vals)
            )
    return path


def read_adjoint_csv(path) -> dict[str, dict[tuple[int, int, int, int], float]]:
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if tuple(next(r)) != ADJOINT_HEADER:
            raise ValueError("unexpected adjoint CSV header")
        for s, _, j, block, a, c, v in r:
            out.setdefault(block, {})[(int(s), int(j), int(a), int(c))] = float(v)
    return out
