"""Interacting-particle Euler-Maruyama for the McKean-Vlasov state equation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .poly import PolyArray
from .problem import ProblemSpec
from .rng import brownian_increments


class BlowUpError(FloatingPointError):
    """Raised when the particle state leaves the float range."""

    def __init__(self, step: int, particle: int):
        super().__init__(f"non-finite state at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self) -> None:
        if self.T <= 0 or self.M < 1:
            raise ValueError("TimeGrid needs T > 0 and M >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    def time(self, m: int) -> float:
        return m * self.dt


class ControlProcess:
    """Control values per (step, particle, coordinate).

    Three forms are supported: a constant point, an explicit array of shape
    ``(M, N, kc)``, and a polynomial feedback ``u(t, x)`` evaluated on each
    particle's own state.  :meth:`realize` turns the first two into arrays;
    feedback controls are only realized during simulation.
    """

    def __init__(self, constant=None, values=None, feedback: PolyArray | None = None, clip=None):
        given = sum(a is not None for a in (constant, values, feedback))
        if given != 1:
            raise ValueError("give exactly one of constant, values, feedback")
        self.constant = None if constant is None else np.atleast_1d(np.asarray(constant, dtype=float))
        self.values = None if values is None else np.asarray(values, dtype=float)
        if self.values is not None and self.values.ndim != 3:
            raise ValueError("control values must have shape (M, N, kc)")
        self.feedback = feedback
        self.clip = clip

    @classmethod
    def const(cls, value) -> "ControlProcess":
        return cls(constant=value)

    @classmethod
    def from_array(cls, values) -> "ControlProcess":
        return cls(values=values)

    @property
    def kind(self) -> str:
        if self.constant is not None:
            return "constant"
        return "values" if self.values is not None else "feedback"

    @property
    def dim(self) -> int:
        if self.constant is not None:
            return self.constant.shape[0]
        if self.values is not None:
            return self.values.shape[2]
        return self.feedback.shape[0]

    def at(self, m: int, t: float, x: np.ndarray) -> np.ndarray:
        """Control of every particle at step ``m`` given states ``x`` (N, n)."""
        N = x.shape[0]
        if self.constant is not None:
            return np.broadcast_to(self.constant, (N, self.dim)).copy()
        if self.values is not None:
            if self.values.shape[1] != N:
                raise ValueError(f"control has {self.values.shape[1]} particles, state has {N}")
            return self.values[m]
        z = np.concatenate([np.full((N, 1), t), x], axis=1)
        out = self.feedback(z)
        if self.clip is not None:
            out = np.clip(out, self.clip[0], self.clip[1])
        return out

    def realize(self, grid: TimeGrid, N: int) -> np.ndarray:
        if self.values is not None:
            if self.values.shape[:2] != (grid.M, N):
                raise ValueError(f"control shape {self.values.shape[:2]} != ({grid.M}, {N})")
            return self.values
        if self.constant is not None:
            return np.broadcast_to(self.constant, (grid.M, N, self.dim)).copy()
        raise ValueError("feedback controls are realized by simulate()")


@dataclass(frozen=True)
class ParticlePathEnsemble:
    """Particle paths ``(M+1, N, n)``, stored increments ``(M, N, d)`` and realized controls ``(M, N, kc)``."""

    paths: np.ndarray
    noise: np.ndarray
    controls: np.ndarray
    seed: int
    grid: TimeGrid

    @property
    def N(self) -> int:
        return self.paths.shape[1]

    def control_process(self) -> ControlProcess:
        return ControlProcess.from_array(self.controls)


def simulate(
    spec: ProblemSpec,
    control: ControlProcess,
    grid: TimeGrid,
    N: int,
    seed: int,
    noise: np.ndarray | None = None,
) -> ParticlePathEnsemble:
    """Euler-Maruyama for the particle system with the same-ensemble empirical law.

    ``noise`` overrides the seeded increments (common random numbers).

    Raises
    ------
    BlowUpError
        At the first step where some particle's state is not finite.
    """
    if N < 2:
        raise ValueError("need at least two particles")
    if abs(grid.T - spec.T) > 1e-12 * max(1.0, spec.T):
        raise ValueError("grid horizon differs from the problem horizon")
    if control.dim != spec.kc:
        raise ValueError("control dimension differs from the control set")
    n, d = spec.n, spec.d
    if noise is None:
        noise = brownian_increments(seed, grid.M, N, d, grid.dt)
    elif noise.shape != (grid.M, N, d):
        raise ValueError(f"noise shape {noise.shape} != {(grid.M, N, d)}")
    paths = np.empty((grid.M + 1, N, n))
    controls = np.empty((grid.M, N, spec.kc))
    paths[0] = spec.x0
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(grid.M):
            t = grid.time(m)
            x = paths[m]
            v = control.at(m, t, x)
            controls[m] = v
            mb = spec.b.basis.values(x).mean(axis=0)
            ms = spec.sigma.basis.values(x).mean(axis=0)
            drift = spec.b(t, x, mb, v)
            diff = spec.sigma(t, x, ms)
            nxt = x + drift * dt + np.einsum("jar,jr->ja", diff, noise[m])
            bad = ~np.all(np.isfinite(nxt), axis=1)
            if bad.any():
                raise BlowUpError(m + 1, int(np.argmax(bad)))
            paths[m + 1] = nxt
    for arr in (paths, controls):
        arr.setflags(write=False)
    return ParticlePathEnsemble(paths, noise, controls, int(seed), grid)


@dataclass(frozen=True)
class MomentReport:
    ratio: float
    sup_moment: float
    control_moment: float
    finite: bool
    N: int

    def to_dict(self) -> dict:
        return dict(ratio=self.ratio, sup_moment=self.sup_moment, control_moment=self.control_moment, finite=self.finite, N=self.N)


def moment_bound_check(ens: ParticlePathEnsemble, control: ControlProcess | None = None, x0=None) -> MomentReport:
    """Empirical ratio ``E sup|X|^8 / (1 + |x0|^8 + E|int |v| ds|^8)``.

    The initial-state term keeps the ratio meaningful when the control is
    zero; ``x0`` defaults to the first knot of the ensemble.
    """
    controls = ens.controls if control is None else control.realize(ens.grid, ens.N)
    sup8 = float(np.mean(np.max(np.linalg.norm(ens.paths, axis=2), axis=0) ** 8))
    ctrl = np.sum(np.linalg.norm(controls, axis=2), axis=0) * ens.grid.dt
    ctrl8 = float(np.mean(ctrl**8))
    x0 = ens.paths[0, 0] if x0 is None else np.asarray(x0, dtype=float)
    denom = 1.0 + float(np.linalg.norm(x0)) ** 8 + ctrl8
    ratio = sup8 / denom
    finite = bool(np.isfinite(ratio))
    if not finite:
        raise FloatingPointError("non-finite path moments")
    return MomentReport(ratio, sup8, ctrl8, finite, ens.N)


def write_paths_csv(ens: ParticlePathEnsemble, path, spec_hash: str = "") -> Path:
    """Dump paths as ``step,time,particle,coord,value`` plus a ``.meta.json`` sidecar."""
    path = Path(path)
    M1, N, n = ens.paths.shape
    step, particle, coord = np.meshgrid(np.arange(M1), np.arange(N), np.arange(n), indexing="ij")
    times = ens.grid.knots[step.ravel()]
    with open(path, "w", newline="\n") as fh:
        fh.write("step,time,particle,coord,value\n")
        rows = zip(step.ravel().tolist(), times.tolist(), particle.ravel().tolist(), coord.ravel().tolist(), ens.paths.ravel().tolist())
        fh.writelines(f"{s},{t!r},{j},{c},{v!r}\n" for s, t, j, c, v in rows)
    meta = {"seed": ens.seed, "N": N, "M": ens.grid.M, "T": ens.grid.T, "n": n, "spec_hash": spec_hash}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_paths_csv(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".meta.json").read_text())
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=float, ndmin=2)
    out = np.empty((meta["M"] + 1, meta["N"], meta["n"]))
    out[data[:, 0].astype(int), data[:, 2].astype(int), data[:, 3].astype(int)] = data[:, 4]
    return out


def hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
