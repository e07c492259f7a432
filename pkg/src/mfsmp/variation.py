"""Spike variations, variation processes, remainders and the transition matrix.

All processes reuse the stored increments of the base ensemble (common
random numbers) and the copy-average rules of :mod:`mfsmp._copies`.
"""

from __future__ import annotations

import csv
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._copies import CloudTables, Copies, grad_pair, hess_pair, mu_apply
from .forward import ControlProcess, ParticlePathEnsemble, TimeGrid, simulate
from .problem import ProblemSpec

ZERO_FLOOR_REL = 1e-10


def _as_array(c, grid: TimeGrid, N: int) -> np.ndarray:
    if isinstance(c, ControlProcess):
        return c.realize(grid, N)
    return np.asarray(c, dtype=float)


def control_distance(v1, v2, grid: TimeGrid, N: int | None = None) -> float:
    """``dt`` times the number of steps at which any particle's controls differ."""
    if N is None:
        sized = [c.values if isinstance(c, ControlProcess) else c for c in (v1, v2)]
        sized = [np.asarray(c) for c in sized if c is not None]
        N = sized[0].shape[1] if sized else 1
    a, b = _as_array(v1, grid, N), _as_array(v2, grid, N)
    if a.shape != b.shape:
        raise ValueError(f"control shapes differ: {a.shape} vs {b.shape}")
    differs = np.any(a != b, axis=(1, 2))
    return float(differs.sum() * grid.dt)


def spike_control(u, v, spike_steps, grid: TimeGrid, N: int) -> ControlProcess:
    """``v`` on ``spike_steps``, ``u`` elsewhere."""
    a, b = _as_array(u, grid, N), _as_array(v, grid, N)
    if a.shape != b.shape:
        raise ValueError("u and v shapes differ")
    steps = np.asarray(sorted(set(int(s) for s in spike_steps)), dtype=int)
    if steps.size and (steps[0] < 0 or steps[-1] >= grid.M):
        raise ValueError(f"spike step out of range [0, {grid.M})")
    out = a.copy()
    out[steps] = b[steps]
    return ControlProcess.from_array(out)


def leading_spike_steps(grid: TimeGrid, d: float) -> np.ndarray:
    """Steps covering ``[0, d)``, rounded to the grid."""
    count = int(np.floor(d / grid.dt + 0.5))
    if not 1 <= count <= grid.M:
        raise ValueError(f"spike length {d} not representable on the grid")
    return np.arange(count)


def uniform_partition(grid: TimeGrid, cells: int) -> np.ndarray:
    """Knot times splitting ``[0, T]`` into ``cells`` nearly equal step-aligned cells."""
    steps = np.round(np.linspace(0, grid.M, cells + 1)).astype(int)
    return steps * grid.dt


def refining_partition(grid: TimeGrid, rho: float, rho_max: float) -> np.ndarray:
    """Partition with about ``rho_max / rho`` cells, preferring cells whose spike count is exact.

    Refining the partition as ``rho`` shrinks keeps each spike cluster
    short, which the limit statements on partition spike sets need.
    """
    target = max(1, int(round(rho_max / rho)))
    for c in range(target, 0, -1):
        if grid.M % c:
            continue
        per = grid.M // c
        if abs(per * rho - round(per * rho)) < 1e-9 and round(per * rho) >= 1:
            return uniform_partition(grid, c)
    return uniform_partition(grid, target)


def finest_partition(grid: TimeGrid, rho: float, rho_max: float | None = None) -> np.ndarray:
    """Shortest cells in which ``rho`` of the steps is a whole number.

    The cell length is the denominator of ``rho`` as a fraction (at most
    ``M``), so every spike cluster is a few steps long and the spike set
    tracks ``rho * t`` to within a few ``dt``.
    """
    steps = Fraction(rho).limit_denominator(grid.M).denominator
    knots = np.arange(0, grid.M + 1, steps)
    if knots[-1] != grid.M:
        knots = np.append(knots, grid.M)
    return knots * grid.dt


def partition_spike_set(grid: TimeGrid, rho: float, partition: Sequence[float]) -> np.ndarray:
    """Leading ``floor(rho * cell_steps + 1/2)`` steps of every partition cell."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    knots = np.asarray(sorted(set([0.0, grid.T] + [float(t) for t in partition])))
    raw = knots / grid.dt
    steps = np.round(raw).astype(int)
    if np.any(np.abs(raw - steps) > 1e-9 * max(1, grid.M)) or steps[0] < 0 or steps[-1] > grid.M:
        raise ValueError("partition must refine the time grid")
    steps = np.unique(steps)
    chosen = []
    for a, b in zip(steps[:-1], steps[1:]):
        count = int(np.floor(rho * (b - a) + 0.5))
        chosen.extend(range(a, a + count))
    return np.asarray(chosen, dtype=int)


@dataclass(frozen=True)
class SpikePerturbation:
    u: np.ndarray
    v: np.ndarray
    spike_steps: np.ndarray
    rho: float
    grid: TimeGrid

    @property
    def d_value(self) -> float:
        return len(self.spike_steps) * self.grid.dt

    def control(self) -> ControlProcess:
        out = self.u.copy()
        out[self.spike_steps] = self.v[self.spike_steps]
        return ControlProcess.from_array(out)


# --- variation processes -----------------------------------------------------


def _lin(tab: CloudTables, z: np.ndarray, copies: Copies) -> np.ndarray:
    """``f_x z + E~[f_mu z~]``."""
    out = np.einsum("j...c,jc->j...", tab["phi_x"], z)
    return out + mu_apply(tab["phi_m"], copies.tilde(grad_pair(tab.gh, z)))


def _quad(tab: CloudTables, z: np.ndarray, copies: Copies) -> np.ndarray:
    """Second-order terms of the expansion in direction ``z`` (with copies)."""
    N = z.shape[0]
    gp = grad_pair(tab.gh, z)
    Gt = np.broadcast_to(copies.tilde(gp), gp.shape)
    Gb = np.broadcast_to(copies.bar(gp), gp.shape)
    out = 0.5 * np.einsum("j...ab,ja,jb->j...", tab["phi_xx"], z, z)
    out = out + np.einsum("j...ai,ja,ji->j...", tab["phi_xm"], z, Gt)
    out = out + 0.5 * mu_apply(tab["phi_m"], copies.tilde(hess_pair(tab.hh, z)))
    out = out + 0.5 * np.einsum("j...il,ji,jl->j...", tab["phi_mm"], Gt, Gb)
    assert out.shape[0] == N
    return out


@dataclass(frozen=True)
class VariationEnsemble:
    x1: np.ndarray
    x2: np.ndarray | None = None
    xstar: np.ndarray | None = None
    ens_u: ParticlePathEnsemble | None = None
    ens_vhat: ParticlePathEnsemble | None = None


def variations(spec: ProblemSpec, ens_u: ParticlePathEnsemble, vhat, copies: Copies | None = None, second: bool = True):
    """First (and optionally second) variation processes along ``ens_u``.

    Returns ``(x1, x2)``; ``x2`` is ``None`` when ``second`` is false.
    """
    copies = copies or Copies()
    grid = ens_u.grid
    N, n = ens_u.N, spec.n
    vh = _as_array(vhat, grid, N)
    if vh.shape != ens_u.controls.shape:
        raise ValueError(f"vhat shape {vh.shape} != {ens_u.controls.shape}")
    dt = grid.dt
    x1 = np.zeros((grid.M + 1, N, n))
    x2 = np.zeros((grid.M + 1, N, n)) if second else None
    for m in range(grid.M):
        t = grid.time(m)
        x, u = ens_u.paths[m], ens_u.controls[m]
        B = CloudTables(spec.b, t, x, u)
        S = CloudTables(spec.sigma, t, x, None)
        dW = ens_u.noise[m]
        z1 = x1[m]
        drift = _lin(B, z1, copies)
        diff = _lin(S, z1, copies)
        changed = np.any(vh[m] != u, axis=1)
        if changed.any():
            Bv = CloudTables(spec.b, t, x, vh[m], names=("phi", "phi_x", "phi_m"), moments=B.m)
            drift = drift + (Bv["phi"] - B["phi"])
        x1[m + 1] = z1 + drift * dt + np.einsum("jar,jr->ja", diff, dW)
        if second:
            z2 = x2[m]
            drift2 = _lin(B, z2, copies) + _quad(B, z1, copies)
            diff2 = _lin(S, z2, copies) + _quad(S, z1, copies)
            if changed.any():
                dbx = Bv["phi_x"] - B["phi_x"]
                dbm = Bv["phi_m"] - B["phi_m"]
                drift2 = drift2 + np.einsum("jac,jc->ja", dbx, z1)
                drift2 = drift2 + mu_apply(dbm, copies.tilde(grad_pair(B.gh, z1)))
            x2[m + 1] = z2 + drift2 * dt + np.einsum("jar,jr->ja", diff2, dW)
    return x1, x2


def first_variation(spec, ens_u, vhat, copies: Copies | None = None) -> np.ndarray:
    return variations(spec, ens_u, vhat, copies, second=False)[0]


def second_variation(spec, ens_u, vhat, x1: np.ndarray | None = None, copies: Copies | None = None) -> np.ndarray:
    """Second variation.  ``x1`` is recomputed internally; if given it must match."""
    z1, z2 = variations(spec, ens_u, vhat, copies, second=True)
    if x1 is not None and x1.shape != z1.shape:
        raise ValueError("x1 shape does not match the ensemble")
    return z2


def remainder(ens_vhat: ParticlePathEnsemble, ens_u: ParticlePathEnsemble, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """``X^vhat - X^u - x1 - x2`` at every knot."""
    shapes = {ens_vhat.paths.shape, ens_u.paths.shape, x1.shape, x2.shape}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {shapes}")
    return ens_vhat.paths - ens_u.paths - x1 - x2


# --- transition matrix -------------------------------------------------------


@dataclass(frozen=True)
class TransitionEnsemble:
    """``phi`` and ``psi`` have shape ``(M+1, N, n, n)``.

    ``inverse_error`` is the largest norm of the particle mean of
    ``psi phi - I``; ``inverse_rms`` the largest per-particle RMS.
    """

    phi: np.ndarray
    psi: np.ndarray
    inverse_error: float
    inverse_rms: float


def _linear_coefficients(spec, t, x, u, copies):
    B = CloudTables(spec.b, t, x, u, names=("phi_x", "phi_m"))
    S = CloudTables(spec.sigma, t, x, None, names=("phi_x", "phi_m"))
    N = x.shape[0]
    gb = np.broadcast_to(copies.tilde(B.gh), B.gh.shape)
    gs = np.broadcast_to(copies.tilde(S.gh), S.gh.shape)
    A = B["phi_x"] + np.einsum("jai,jic->jac", B["phi_m"], gb)
    # C[j, r] acts on the state: (sigma_x + E~[sigma_mu])[:, r, :]
    C = S["phi_x"] + np.einsum("jari,jic->jarc", S["phi_m"], gs)
    C = np.transpose(C, (0, 2, 1, 3))
    assert A.shape[0] == N
    return A, C


def transition_matrix(spec: ProblemSpec, ens_u: ParticlePathEnsemble, copies: Copies | None = None) -> TransitionEnsemble:
    """Euler schemes for the fundamental matrix and its inverse dynamics.

    ``dPhi = A Phi dt + sum_r C_r Phi dW_r`` and
    ``dPsi = Psi (-A + sum_r C_r^2) dt - sum_r Psi C_r dW_r`` with
    ``A = b_x + E~[b_mu]``, ``C_r = sigma_x^r + E~[sigma_mu^r]``.
    """
    copies = copies or Copies()
    grid = ens_u.grid
    N, n = ens_u.N, spec.n
    eye = np.broadcast_to(np.eye(n), (N, n, n))
    phi = np.empty((grid.M + 1, N, n, n))
    psi = np.empty_like(phi)
    phi[0] = psi[0] = eye
    dt = grid.dt
    for m in range(grid.M):
        A, C = _linear_coefficients(spec, grid.time(m), ens_u.paths[m], ens_u.controls[m], copies)
        dW = ens_u.noise[m]
        Cw = np.einsum("jrac,jr->jac", C, dW)
        C2 = np.einsum("jrab,jrbc->jac", C, C)
        phi[m + 1] = phi[m] + (A @ phi[m]) * dt + Cw @ phi[m]
        psi[m + 1] = psi[m] + psi[m] @ (-A + C2) * dt - psi[m] @ Cw
        det = np.linalg.det(phi[m + 1])
        if np.any(np.abs(det) < 1e-10):
            raise np.linalg.LinAlgError(f"transition matrix ill-conditioned at step {m + 1}")
    prod = psi @ phi - np.eye(n)
    mean_err = float(np.max(np.linalg.norm(prod.mean(axis=1), axis=(1, 2))))
    rms = float(np.max(np.sqrt(np.mean(np.sum(prod**2, axis=(2, 3)), axis=1))))
    return TransitionEnsemble(phi, psi, mean_err, rms)


def drift_jumps(spec: ProblemSpec, ens_u: ParticlePathEnsemble, vhat) -> np.ndarray:
    """``b(t, X^u, mu, vhat) - b(t, X^u, mu, u)`` per step, shape ``(M, N, n)``."""
    grid = ens_u.grid
    vh = _as_array(vhat, grid, ens_u.N)
    out = np.zeros(ens_u.controls.shape[:2] + (spec.n,))
    for m in range(grid.M):
        if not np.any(vh[m] != ens_u.controls[m]):
            continue
        x = ens_u.paths[m]
        mb = spec.b.basis.values(x).mean(axis=0)
        t = grid.time(m)
        out[m] = spec.b(t, x, mb, vh[m]) - spec.b(t, x, mb, ens_u.controls[m])
    return out


def representation(trans: TransitionEnsemble, jumps: np.ndarray, dt: float) -> np.ndarray:
    """``Phi_t sum_{s<t} Psi_s db_s dt`` at every knot."""
    M, N, n = jumps.shape
    inner = np.zeros((M + 1, N, n))
    inner[1:] = np.cumsum(np.einsum("mjab,mjb->mja", trans.psi[:M], jumps) * dt, axis=0)
    return np.einsum("mjab,mjb->mja", trans.phi, inner)


# --- order studies -----------------------------------------------------------


def _sup_sq(z: np.ndarray) -> np.ndarray:
    return np.max(np.sum(z**2, axis=2), axis=0)


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    return float(a.mean()), float(a.std(ddof=1) / np.sqrt(a.shape[0]))


def fit_slope(d: Sequence[float], est: Sequence[float]) -> float:
    """Least-squares slope of ``log est`` against ``log d``."""
    x, y = np.log(np.asarray(d, dtype=float)), np.log(np.asarray(est, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def decreasing_within_se(values: Sequence[float], errors: Sequence[float]) -> bool:
    """Each rung at most the previous one plus its own standard error."""
    return all(values[k] <= values[k - 1] + errors[k] for k in range(1, len(values)))


@dataclass
class OrderStudy:
    """Variation sizes along a spike ladder.

    ``rows`` holds ``(quantity, d, estimate, stderr)``.  A quantity whose
    every estimate is below ``zero_floor`` is identically zero up to
    roundoff and passes its order check.
    """

    fixture: str
    d: np.ndarray
    stats: dict[str, tuple[np.ndarray, np.ndarray]]
    zero_floor: float
    thresholds: dict = field(default_factory=lambda: {"x1": 1.8, "x2": 3.6})

    def is_zero(self, q: str) -> bool:
        return bool(np.all(self.stats[q][0] <= self.zero_floor))

    def slope(self, q: str) -> float:
        if self.is_zero(q):
            return float("inf")
        return fit_slope(self.d, np.maximum(self.stats[q][0], self.zero_floor))

    def remainder_ratio(self) -> tuple[np.ndarray, np.ndarray]:
        est, se = self.stats["xstar"]
        est = np.where(est <= self.zero_floor, 0.0, est)
        return est / self.d**4, se / self.d**4

    @property
    def checks(self) -> dict[str, bool]:
        r, rse = self.remainder_ratio()
        return {
            "x1_slope": self.slope("x1") >= self.thresholds["x1"],
            "x2_slope": self.slope("x2") >= self.thresholds["x2"],
            "remainder_decreasing": self.is_zero("xstar") or decreasing_within_se(r, rse),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def rows(self) -> list[tuple[str, float, float, float]]:
        out = []
        for q, (est, se) in self.stats.items():
            out.extend((q, float(d), float(e), float(s)) for d, e, s in zip(self.d, est, se))
        r, rse = self.remainder_ratio()
        out.extend(("xstar_over_d4", float(d), float(e), float(s)) for d, e, s in zip(self.d, r, rse))
        return out

    def to_dict(self) -> dict:
        r, rse = self.remainder_ratio()
        return {
            "fixture": self.fixture,
            "d": self.d.tolist(),
            "estimates": {q: {"estimate": e.tolist(), "stderr": s.tolist()} for q, (e, s) in self.stats.items()},
            "slopes": {q: (None if self.is_zero(q) else self.slope(q)) for q in ("x1", "x2", "xstar")},
            "identically_zero": {q: self.is_zero(q) for q in self.stats},
            "remainder_ratio": {"estimate": r.tolist(), "stderr": rse.tolist()},
            "checks": self.checks,
            "passed": self.passed,
        }


def order_study(
    spec: ProblemSpec,
    u: ControlProcess,
    v: ControlProcess,
    d_ladder: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    N: int = 10_000,
    M: int = 100,
    seed: int = 0,
    copies: Copies | None = None,
    fixture: str = "",
    inject_x2: float = 0.0,
) -> OrderStudy:
    """Spike ``v`` into ``u`` on ``[0, d)`` for each ``d`` (fractions of ``T``).

    ``inject_x2`` adds ``inject_x2 * d**1.5`` to the second variation; it is
    a negative control for the threshold logic only.
    """
    if len(d_ladder) < 4:
        raise ValueError("order study needs at least four ladder rungs")
    grid = TimeGrid(spec.T, M)
    ens_u = simulate(spec, u, grid, N, seed)
    ua = ens_u.controls
    va = v.realize(grid, N) if v.kind != "feedback" else None
    if va is None:
        raise ValueError("the alternative control must be open-loop")
    stats = {q: ([], []) for q in ("x1", "x2", "xstar")}
    realized = []
    for frac in d_ladder:
        steps = leading_spike_steps(grid, frac * spec.T)
        vhat = spike_control(ua, va, steps, grid, N)
        ens_v = simulate(spec, vhat, grid, N, seed, noise=ens_u.noise)
        x1, x2 = variations(spec, ens_u, vhat, copies)
        d = len(steps) * grid.dt
        if inject_x2:
            x2 = x2.copy()
            x2[1:] += inject_x2 * d**1.5
        xs = remainder(ens_v, ens_u, x1, x2)
        realized.append(d)
        for q, z in (("x1", x1), ("x2", x2), ("xstar", xs)):
            e, s = _mean_se(_sup_sq(z))
            stats[q][0].append(e)
            stats[q][1].append(s)
    scale = 1.0 + float(np.max(np.abs(ens_u.paths)))
    floor = (ZERO_FLOOR_REL * scale) ** 2
    return OrderStudy(
        fixture or spec.name,
        np.asarray(realized),
        {q: (np.asarray(a), np.asarray(b)) for q, (a, b) in stats.items()},
        floor,
    )


@dataclass
class SpikeLimitStudy:
    """Normalized errors of the partition-spike limit and of the transition representation."""

    rho_target: np.ndarray
    rho: np.ndarray
    cells: list[int]
    limit_error: np.ndarray
    limit_se: np.ndarray
    repr_error: np.ndarray
    repr_se: np.ndarray
    inverse_error: float
    inverse_rms: float
    target_ratio: float = 0.1

    def _ratio(self, e: np.ndarray) -> float:
        return float(e[-1] / e[0]) if e[0] > 0 else 0.0

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "limit_decay": self._ratio(self.limit_error) <= self.target_ratio,
            "representation_decay": self._ratio(self.repr_error) <= self.target_ratio,
        }

    def to_dict(self) -> dict:
        return {
            "rho_target": self.rho_target.tolist(),
            "rho": self.rho.tolist(),
            "cells": self.cells,
            "limit_error": self.limit_error.tolist(),
            "limit_se": self.limit_se.tolist(),
            "limit_ratio": self._ratio(self.limit_error),
            "representation_error": self.repr_error.tolist(),
            "representation_se": self.repr_se.tolist(),
            "representation_ratio": self._ratio(self.repr_error),
            "inverse_error": self.inverse_error,
            "inverse_rms": self.inverse_rms,
            "checks": self.checks,
        }


def _sup_mean_sq(z: np.ndarray) -> tuple[float, float]:
    sq = np.sum(z**2, axis=2)
    mean = sq.mean(axis=1)
    m = int(np.argmax(mean))
    return float(mean[m]), float(sq[m].std(ddof=1) / np.sqrt(sq.shape[1]))


def spike_limit_study(
    spec: ProblemSpec,
    u: ControlProcess,
    v: ControlProcess,
    rho_ladder: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    N: int = 10_000,
    M: int = 320,
    seed: int = 0,
    copies: Copies | None = None,
) -> SpikeLimitStudy:
    """Partition spike sets against ``rho * x1^v`` and against ``Phi int Psi db``.

    Both errors are ``sup_t E|.|^2 / rho^2`` with ``rho`` the realized
    spike fraction.
    """
    grid = TimeGrid(spec.T, M)
    ens_u = simulate(spec, u, grid, N, seed)
    ua, va = ens_u.controls, v.realize(grid, N)
    x1_full = first_variation(spec, ens_u, va, copies)
    trans = transition_matrix(spec, ens_u, copies)
    rows = {k: [] for k in ("rho", "cells", "le", "lse", "re", "rse")}
    for rho in rho_ladder:
        part = refining_partition(grid, rho, rho_ladder[0])
        steps = partition_spike_set(grid, rho, part)
        r = len(steps) / grid.M
        vhat = spike_control(ua, va, steps, grid, N)
        x1 = first_variation(spec, ens_u, vhat, copies)
        le, lse = _sup_mean_sq(x1 - r * x1_full)
        z = representation(trans, drift_jumps(spec, ens_u, vhat), grid.dt)
        re, rse = _sup_mean_sq(x1 - z)
        for key, val in zip(rows, (r, len(part) - 1, le / r**2, lse / r**2, re / r**2, rse / r**2)):
            rows[key].append(val)
    return SpikeLimitStudy(
        np.asarray(rho_ladder, dtype=float),
        np.asarray(rows["rho"]),
        rows["cells"],
        np.asarray(rows["le"]),
        np.asarray(rows["lse"]),
        np.asarray(rows["re"]),
        np.asarray(rows["rse"]),
        trans.inverse_error,
        trans.inverse_rms,
    )


# --- convergence CSV ----------------------------------------------------------

CONVERGENCE_HEADER = ("fixture", "quantity", "d", "estimate", "stderr")


def write_convergence_csv(studies: Sequence[OrderStudy], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_HEADER)
        for st in studies:
            for q, d, e, s in st.rows:
                w.writerow([st.fixture, q, repr(d), repr(e), repr(s)])
    return path


def read_convergence_csv(path) -> list[tuple[str, str, float, float, float]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CONVERGENCE_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(f, q, float(d), float(e), float(s)) for f, q, d, e, s in r]
