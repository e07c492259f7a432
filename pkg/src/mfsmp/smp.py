"""Hamiltonian gaps, first- and second-order maximum-principle checks, cost,
the spike expansion audit and the Ito residual for measure functionals."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._copies import CloudTables, Copies, grad_pair
from .adjoint import AdjointSolution, RegressionBasis, solve_adjoints
from .forward import ControlProcess, ParticlePathEnsemble, TimeGrid, simulate
from .measure import EmpiricalMeasure
from .problem import MomentCoupledFunction, ProblemSpec, eval_coefficient
from .variation import ZERO_FLOOR_REL, finest_partition, first_variation, partition_spike_set, spike_control

ABS_TOL = 1e-12


def hamiltonian(spec: ProblemSpec, t: float, x, mu: EmpiricalMeasure, p, q, v) -> float:
    """``p . b + q : sigma + h`` at one point."""
    b = eval_coefficient(spec.b, t, x, mu, v)
    s = eval_coefficient(spec.sigma, t, x, mu)
    h = eval_coefficient(spec.h, t, x, mu, v)
    out = float(np.dot(np.asarray(p, dtype=float).reshape(-1), b) + np.sum(np.asarray(q, dtype=float).reshape(s.shape) * s) + h)
    if not np.isfinite(out):
        raise FloatingPointError("non-finite Hamiltonian")
    return out


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    a = np.asarray(a, dtype=float)
    se = float(a.std(ddof=1) / np.sqrt(a.shape[0])) if a.shape[0] > 1 else 0.0
    return float(a.mean()), se


def _v_rows(v, N: int, kc: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float).reshape(1, kc), (N, kc))


def _control_jump_h(spec, t, x, u, v):
    """Per-particle ``H(v) - H(u)`` at fixed ``(p, q)`` reduces to ``p.db + dh``."""
    mb = spec.b.basis.values(x).mean(axis=0)
    mh = spec.h.basis.values(x).mean(axis=0)
    db = spec.b(t, x, mb, v) - spec.b(t, x, mb, u)
    dh = spec.h(t, x, mh, v) - spec.h(t, x, mh, u)
    return db, dh


def gap_samples(spec: ProblemSpec, ens: ParticlePathEnsemble, adj: AdjointSolution, v) -> np.ndarray:
    """Per-step, per-particle ``H(v) - H(u)``, shape ``(M, N)``."""
    grid = ens.grid
    N = ens.N
    vv = _v_rows(v, N, spec.kc)
    out = np.empty((grid.M, N))
    for m in range(grid.M):
        db, dh = _control_jump_h(spec, grid.time(m), ens.paths[m], ens.controls[m], vv)
        out[m] = np.einsum("ja,ja->j", adj.p[m], db) + dh
    return out


@dataclass(frozen=True)
class GapTable:
    v: np.ndarray
    mean: np.ndarray
    se: np.ndarray


def hamiltonian_gap(spec: ProblemSpec, ens: ParticlePathEnsemble, adj: AdjointSolution | None, v) -> GapTable:
    """Particle mean and standard error of ``H(v) - H(u)`` at knots ``0..M-1``.

    The diffusion does not depend on the control, so the ``q`` pairing
    cancels in the difference.
    """
    if adj is None:
        raise ValueError("hamiltonian_gap needs an adjoint solution")
    s = gap_samples(spec, ens, adj, v)
    se = s.std(axis=1, ddof=1) / np.sqrt(s.shape[1])
    return GapTable(np.atleast_1d(np.asarray(v, dtype=float)), s.mean(axis=1), se)


@dataclass(frozen=True)
class Violation:
    value: float
    significant: bool
    witness: tuple[int, tuple[float, ...]] | None


def first_order_residual(gaps: Sequence[GapTable], nsigma: float = 3.0) -> Violation:
    """``max (-E dH)_+`` over knots and grid points, with a witness when significant."""
    if not gaps:
        raise ValueError("empty control grid")
    best, witness, significant = 0.0, None, False
    for g in gaps:
        neg = -g.mean
        m = int(np.argmax(neg))
        if neg[m] > best:
            best = float(neg[m])
        sig = neg > nsigma * g.se + ABS_TOL
        if sig.any():
            k = int(np.argmax(np.where(sig, neg, -np.inf)))
            if not significant or neg[k] > witness_val:
                witness_val = float(neg[k])
                witness = (k, tuple(float(a) for a in g.v))
            significant = True
    return Violation(best, significant, witness)


@dataclass(frozen=True)
class SingularRegion:
    pairs: list[tuple[int, int]]
    positive_measure: bool
    knots: int
    grid_size: int

    def covers_grid(self) -> bool:
        return len(self.pairs) == self.knots * self.grid_size


def detect_singular_region(gaps: Sequence[GapTable], tol_sing: float | None = None, u_point=None, nsigma: float = 3.0) -> SingularRegion:
    """Pairs ``(knot, grid index)`` with ``|E dH| <= tol_sing`` (default ``nsigma`` standard errors).

    The region has positive measure on the grid when it touches at least
    two knots and at least one grid point other than ``u_point``.
    """
    pairs = []
    for i, g in enumerate(gaps):
        tol = nsigma * g.se if tol_sing is None else np.full_like(g.mean, tol_sing)
        pairs.extend((int(m), i) for m in np.nonzero(np.abs(g.mean) <= tol)[0])
    knots = {m for m, _ in pairs}
    others = set()
    for m, i in pairs:
        if u_point is None or not np.allclose(gaps[i].v, np.atleast_1d(u_point)):
            others.add(i)
    M = len(gaps[0].mean) if gaps else 0
    return SingularRegion(sorted(pairs), len(knots) >= 2 and len(others) >= 1, M, len(gaps))


def _delta_tables(spec, t, x, u, v):
    names = ("phi", "phi_x", "phi_m")
    Bu = CloudTables(spec.b, t, x, u, names=names)
    Bv = CloudTables(spec.b, t, x, v, names=names, moments=Bu.m)
    Hu = CloudTables(spec.h, t, x, u, names=names)
    Hv = CloudTables(spec.h, t, x, v, names=names, moments=Hu.m)
    return Bu, Bv, Hu, Hv


def _dH_parts(Bu, Bv, Hu, Hv, p):
    db = Bv["phi"] - Bu["phi"]
    dHx = np.einsum("jac,ja->jc", Bv["phi_x"] - Bu["phi_x"], p) + (Hv["phi_x"] - Hu["phi_x"])
    wb = np.einsum("jai,ja->ji", Bv["phi_m"] - Bu["phi_m"], p)
    wh = Hv["phi_m"] - Hu["phi_m"]
    return db, dHx, wb, wh


def _copy_pairing(wb, wh, Bu, Hu, z, copies):
    """``E~[dH_mu(X_j, X~) . z~]`` for per-particle weights on each basis."""
    N = z.shape[0]
    gb = np.broadcast_to(copies.tilde(grad_pair(Bu.gh, z)), wb.shape)
    gh = np.broadcast_to(copies.tilde(grad_pair(Hu.gh, z)), wh.shape)
    out = np.einsum("ji,ji->j", wb, gb) + np.einsum("ji,ji->j", wh, gh)
    assert out.shape == (N,)
    return out


def condition_samples(spec, ens, adj: AdjointSolution, v, copies: Copies | None = None) -> np.ndarray:
    """Per-step, per-particle second-order condition value, shape ``(M, N)``."""
    if adj.P is None:
        raise ValueError("second-order condition needs the second-order adjoint")
    copies = copies or Copies()
    grid = ens.grid
    vv = _v_rows(v, ens.N, spec.kc)
    out = np.empty((grid.M, ens.N))
    for m in range(grid.M):
        Bu, Bv, Hu, Hv = _delta_tables(spec, grid.time(m), ens.paths[m], ens.controls[m], vv)
        db, dHx, wb, wh = _dH_parts(Bu, Bv, Hu, Hv, adj.p[m])
        val = np.einsum("ja,ja->j", dHx, db)
        val = val + _copy_pairing(wb, wh, Bu, Hu, db, copies)
        val = val + np.einsum("ja,jab,jb->j", db, adj.P[m], db)
        out[m] = val
    return out


@dataclass(frozen=True)
class ConditionTable:
    v: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    quantiles: np.ndarray  # (M, 3): 1%, 50%, 99% per knot


def second_order_condition(spec, ens, adj: AdjointSolution, v, copies: Copies | None = None) -> ConditionTable:
    s = condition_samples(spec, ens, adj, v, copies)
    se = s.std(axis=1, ddof=1) / np.sqrt(s.shape[1])
    qs = np.quantile(s, [0.01, 0.5, 0.99], axis=1).T
    return ConditionTable(np.atleast_1d(np.asarray(v, dtype=float)), s.mean(axis=1), se, qs)


def second_order_violation(tables: Sequence[ConditionTable], region: SingularRegion, nsigma: float = 3.0) -> Violation:
    best, witness, significant = 0.0, None, False
    for m, i in region.pairs:
        t = tables[i]
        neg = -t.mean[m]
        if neg > best:
            best = float(neg)
        if neg > nsigma * t.se[m] + ABS_TOL * (1 + abs(t.mean[m])):
            if not significant or neg > best_sig:
                best_sig = float(neg)
                witness = (m, tuple(float(a) for a in t.v))
            significant = True
    return Violation(best, significant, witness)


def cost_samples(spec: ProblemSpec, ens: ParticlePathEnsemble) -> np.ndarray:
    grid = ens.grid
    total = np.zeros(ens.N)
    for m in range(grid.M):
        x = ens.paths[m]
        mh = spec.h.basis.values(x).mean(axis=0)
        total += spec.h(grid.time(m), x, mh, ens.controls[m]) * grid.dt
    xT = ens.paths[grid.M]
    mT = spec.Phi.basis.values(xT).mean(axis=0)
    return total + spec.Phi(grid.T, xT, mT)


def cost(spec: ProblemSpec, ens: ParticlePathEnsemble, control: ControlProcess | None = None) -> tuple[float, float]:
    """``J`` estimate and standard error; ``control`` must be the one ``ens`` was simulated with."""
    if control is not None and control.kind != "feedback":
        if not np.array_equal(control.realize(ens.grid, ens.N), ens.controls):
            raise ValueError("control differs from the ensemble's realized control")
    return _mean_se(cost_samples(spec, ens))


# --- SMP report ------------------------------------------------------------------


@dataclass
class SMPReport:
    meta: dict
    grid_points: np.ndarray
    knots: np.ndarray
    gaps: list[GapTable]
    first: Violation
    region: SingularRegion
    conditions: list[ConditionTable]
    second: Violation
    expansion: dict | None = None

    @property
    def exit_code(self) -> int:
        if self.first.significant:
            return 3
        if self.second.significant:
            return 4
        return 0

    def to_dict(self) -> dict:
        def table(rows):
            return [
                {"v": r.v.tolist(), "mean": r.mean.tolist(), "stderr": r.se.tolist()}
                | ({"quantiles_1_50_99": r.quantiles.tolist()} if hasattr(r, "quantiles") else {})
                for r in rows
            ]

        def viol(vl: Violation):
            return {"value": vl.value, "significant": vl.significant, "witness": None if vl.witness is None else {"knot": vl.witness[0], "v": list(vl.witness[1])}}

        return {
            "meta": self.meta,
            "first_order": {"control_grid": self.grid_points.tolist(), "gaps": table(self.gaps), "violation": viol(self.first)},
            "singular_region": {
                "pairs": [list(p) for p in self.region.pairs],
                "size": len(self.region.pairs),
                "covers_grid": self.region.covers_grid(),
                "positive_measure": self.region.positive_measure,
            },
            "second_order": {"conditions": table(self.conditions), "violation": viol(self.second)},
            "expansion_audit": self.expansion,
        }

    def write_csv(self, directory) -> list[Path]:
        """One flat CSV per table: ``knot,time,v,estimate,stderr``."""
        directory = Path(directory)
        out = []
        for name, rows in (("gap", self.gaps), ("second_order", self.conditions)):
            path = directory / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["knot", "time", "v", "estimate", "stderr"])
                for r in rows:
                    label = ";".join(repr(float(a)) for a in r.v)
                    for m, (e, s) in enumerate(zip(r.mean, r.se)):
                        w.writerow([m, repr(float(self.knots[m])), label, repr(float(e)), repr(float(s))])
            out.append(path)
        return out


def check_candidate(
    spec: ProblemSpec,
    ens: ParticlePathEnsemble,
    adj: AdjointSolution,
    grid_points=None,
    tol_sing: float | None = None,
    u_point=None,
    copies: Copies | None = None,
    meta: dict | None = None,
) -> SMPReport:
    """Both maximum-principle checks on the control grid."""
    pts = spec.controls.points if grid_points is None else np.asarray(grid_points, dtype=float).reshape(-1, spec.kc)
    if pts.shape[0] == 0:
        raise ValueError("empty control grid")
    gaps = [hamiltonian_gap(spec, ens, adj, v) for v in pts]
    first = first_order_residual(gaps)
    region = detect_singular_region(gaps, tol_sing, u_point)
    conds = [second_order_condition(spec, ens, adj, v, copies) for v in pts]
    second = second_order_violation(conds, region)
    meta = dict(meta or {})
    meta.setdefault("control_grid_note", "for-all-v checks are evaluated on the listed control grid only")
    return SMPReport(meta, pts, ens.grid.knots, gaps, first, region, conds, second)


# --- expansion audit ---------------------------------------------------------------


@dataclass
class ExpansionAudit:
    rho_target: np.ndarray
    rho: np.ndarray
    delta_J: np.ndarray
    delta_se: np.ndarray
    c1: float
    c2: float
    c1_se: float
    c2_se: float
    c1_pred: float
    c1_pred_se: float
    c2_pred: float
    c2_pred_se: float
    residual: np.ndarray
    residual_se: np.ndarray
    partition_shift: np.ndarray | None = None
    raw_fit: tuple[float, float] | None = None
    tolerances: dict = field(default_factory=lambda: {"c1_rel": 0.10, "c2_rel": 0.25, "nsigma": 3.0})

    def _close(self, fit, fit_se, pred, pred_se, rel) -> bool:
        k = self.tolerances["nsigma"]
        return abs(fit - pred) <= max(rel * abs(pred), k * np.hypot(fit_se, pred_se), ABS_TOL)

    @property
    def checks(self) -> dict[str, bool]:
        # residuals at roundoff level count as zero
        floor = ZERO_FLOOR_REL * max(1.0, float(np.max(np.abs(self.delta_J)))) / self.rho**2
        r = np.where(self.residual <= floor, 0.0, self.residual)
        decreasing = all(r[k] <= r[k - 1] + self.residual_se[k] for k in range(1, len(self.rho)))
        return {
            "c1_matches_prediction": bool(self._close(self.c1, self.c1_se, self.c1_pred, self.c1_pred_se, self.tolerances["c1_rel"])),
            "c2_matches_prediction": bool(self._close(self.c2, self.c2_se, self.c2_pred, self.c2_pred_se, self.tolerances["c2_rel"])),
            "residual_decreasing": bool(decreasing),
        }

    @property
    def consistent(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "rho_target": self.rho_target.tolist(),
            "rho": self.rho.tolist(),
            "delta_J": self.delta_J.tolist(),
            "delta_J_stderr": self.delta_se.tolist(),
            "c1": self.c1,
            "c1_stderr": self.c1_se,
            "c2": self.c2,
            "c2_stderr": self.c2_se,
            "c1_predicted": self.c1_pred,
            "c1_predicted_stderr": self.c1_pred_se,
            "c2_predicted": self.c2_pred,
            "c2_predicted_stderr": self.c2_pred_se,
            "residual_over_rho2": self.residual.tolist(),
            "residual_over_rho2_stderr": self.residual_se.tolist(),
            "partition_shift": None if self.partition_shift is None else self.partition_shift.tolist(),
            "unshifted_fit": None if self.raw_fit is None else list(self.raw_fit),
            "tolerances": self.tolerances,
            "checks": self.checks,
            "consistent": self.consistent,
        }


def fit_quadratic_through_origin(rho, y, se) -> tuple[float, float, float, float]:
    """Weighted least squares ``y ~ c1 rho + c2 rho^2``; returns ``c1, c2, se1, se2``."""
    rho, y, se = (np.asarray(a, dtype=float) for a in (rho, y, se))
    if np.all(y == 0):
        return 0.0, 0.0, 0.0, 0.0
    floor = 1e-14 * max(1.0, float(np.max(np.abs(y))))
    w = 1.0 / np.maximum(se, floor) ** 2
    A = np.stack([rho, rho**2], axis=1)
    AtW = A.T * w
    cov = np.linalg.inv(AtW @ A)
    c = cov @ (AtW @ y)
    return float(c[0]), float(c[1]), float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))


def predicted_coefficients(spec, ens, adj: AdjointSolution, va: np.ndarray, copies: Copies | None = None):
    """Predicted ``c1 = E int dH`` and ``c2 = E int {dH_x x1 + E~[dH_mu x1~] + db^T P x1}``.

    ``x1`` is the first variation for ``v`` applied on the whole horizon.
    Returns ``(c1, se1, c2, se2)``.
    """
    copies = copies or Copies()
    grid = ens.grid
    x1 = first_variation(spec, ens, va, copies)
    i1 = np.zeros(ens.N)
    i2 = np.zeros(ens.N)
    for m in range(grid.M):
        Bu, Bv, Hu, Hv = _delta_tables(spec, grid.time(m), ens.paths[m], ens.controls[m], va[m])
        db, dHx, wb, wh = _dH_parts(Bu, Bv, Hu, Hv, adj.p[m])
        dh = Hv["phi"] - Hu["phi"]
        i1 += (np.einsum("ja,ja->j", adj.p[m], db) + dh) * grid.dt
        z = x1[m]
        val = np.einsum("ja,ja->j", dHx, z) + _copy_pairing(wb, wh, Bu, Hu, z, copies)
        if adj.P is not None:
            val = val + np.einsum("ja,jab,jb->j", db, adj.P[m], z)
        i2 += val * grid.dt
    c1, s1 = _mean_se(i1)
    c2, s2 = _mean_se(i2)
    return c1, s1, c2, s2


def expansion_audit(
    spec: ProblemSpec,
    u: ControlProcess,
    v: ControlProcess,
    rho_ladder: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    partition: Callable[[TimeGrid, float, float], np.ndarray] = finest_partition,
    N: int = 10_000,
    M: int = 100,
    seed: int = 0,
    copies: Copies | None = None,
    basis: RegressionBasis | None = None,
) -> ExpansionAudit:
    """Fit ``J(v_rho) - J(u)`` against ``c1 rho + c2 rho^2`` and compare with the adjoint prediction.

    ``partition(grid, rho, rho_max)`` returns the partition knots for one
    rung; each rung uses the realized spike fraction.  Before fitting, the
    cost differences are shifted by ``int_G E[dH] - rho int_0^T E[dH]``,
    the exactly computable gap between integrating the first-order term
    over the spike set ``G`` and over the whole horizon; on a finite
    partition that gap is of order ``rho`` times the cell width and would
    otherwise leak into both fitted coefficients.
    """
    ladder = [float(r) for r in rho_ladder]
    if len(ladder) < 3:
        raise ValueError("expansion audit needs at least three ladder rungs")
    if any(b >= a for a, b in zip(ladder, ladder[1:])) or not all(0 < r < 1 for r in ladder):
        raise ValueError("rho ladder must be strictly decreasing inside (0, 1)")
    grid = TimeGrid(spec.T, M)
    ens_u = simulate(spec, u, grid, N, seed)
    ju = cost_samples(spec, ens_u)
    va = v.realize(grid, N)
    adj = solve_adjoints(spec, ens_u, basis, copies)
    c1p, s1p, c2p, s2p = predicted_coefficients(spec, ens_u, adj, va, copies)
    gap_path = np.array([gap_samples_step(spec, ens_u, adj, va, m).mean() for m in range(grid.M)])
    rho, dj, dse, shift = [], [], [], []
    for r in ladder:
        steps = partition_spike_set(grid, r, partition(grid, r, ladder[0]))
        vhat = spike_control(ens_u.controls, va, steps, grid, N)
        ens_v = simulate(spec, vhat, grid, N, seed, noise=ens_u.noise)
        e, s = _mean_se(cost_samples(spec, ens_v) - ju)
        realized = len(steps) / grid.M
        rho.append(realized)
        dj.append(e)
        dse.append(s)
        shift.append(float(gap_path[steps].sum() * grid.dt) - realized * c1p)
    rho, dj, dse, shift = (np.asarray(a) for a in (rho, dj, dse, shift))
    y = dj - shift
    c1, c2, e1, e2 = fit_quadratic_through_origin(rho, y, dse)
    resid = np.abs(y - c1 * rho - c2 * rho**2) / rho**2
    raw = fit_quadratic_through_origin(rho, dj, dse)
    return ExpansionAudit(
        np.asarray(ladder), rho, dj, dse, c1, c2, e1, e2, c1p, s1p, c2p, s2p, resid, dse / rho**2,
        partition_shift=shift, raw_fit=raw[:2],
    )


def gap_samples_step(spec, ens, adj, va, m) -> np.ndarray:
    """Per-particle ``H(v) - H(u)`` at step ``m`` for a realized control array ``va``."""
    db, dh = _control_jump_h(spec, ens.grid.time(m), ens.paths[m], ens.controls[m], va[m])
    return np.einsum("ja,ja->j", adj.p[m], db) + dh


# --- Ito residual ----------------------------------------------------------------------


def ito_residual(
    spec: ProblemSpec,
    functional: MomentCoupledFunction,
    ens: ParticlePathEnsemble,
    s: int,
    finite_n: bool = True,
    copies: Copies | None = None,
) -> tuple[float, float]:
    """Residual of the measure Ito formula at knot ``s``, with its standard error.

    ``functional`` is ``Phi(x, mu)`` (terminal-cost kind).  With
    ``finite_n`` the quadratic covariation of the empirical moments, which
    is ``O(1/N)`` and absent in the mean-field limit, is included so the
    identity is unbiased for the particle system.
    """
    copies = copies or Copies()
    if functional.kind != "terminal_cost" or functional.n != spec.n:
        raise ValueError("functional must be a scalar Phi(x, mu) on the state space")
    grid = ens.grid
    if not 0 <= s <= grid.M:
        raise ValueError("knot out of range")
    N = ens.N
    integral = np.zeros(N)
    names = ("phi_x", "phi_m", "phi_xx", "phi_xm", "phi_mm")
    for m in range(s):
        t, x, u = grid.time(m), ens.paths[m], ens.controls[m]
        mb = spec.b.basis.values(x).mean(axis=0)
        ms = spec.sigma.basis.values(x).mean(axis=0)
        b = spec.b(t, x, mb, u)
        sg = spec.sigma(t, x, ms)
        a = np.einsum("jar,jbr->jab", sg, sg)
        F = CloudTables(functional, t, x, None, names=names)
        val = np.einsum("ja,ja->j", F["phi_x"], b) + 0.5 * np.einsum("jab,jab->j", F["phi_xx"], a)
        per_copy = grad_pair(F.gh, b) + 0.5 * np.einsum("jkab,jab->jk", F.hh, a)
        val = val + np.einsum("ji,ji->j", F["phi_m"], np.broadcast_to(copies.tilde(per_copy), F["phi_m"].shape))
        if finite_n:
            cov = np.einsum("jia,jab,jlb->jil", F.gh, a, F.gh)
            val = val + 0.5 / N * np.einsum("jil,jil->j", F["phi_mm"], np.broadcast_to(copies.tilde(cov), F["phi_mm"].shape))
            cross = np.einsum("jab,jib->jai", a, F.gh)
            val = val + 1.0 / N * np.einsum("jai,jai->j", F["phi_xm"], cross)
        integral += val * grid.dt
    xs = ens.paths[s]
    ms_ = functional.basis.values(xs).mean(axis=0)
    x0 = ens.paths[0]
    m0 = functional.basis.values(x0).mean(axis=0)
    lhs = functional(grid.time(s), xs, ms_) - functional(0.0, x0, m0)
    return _mean_se(lhs - integral)
