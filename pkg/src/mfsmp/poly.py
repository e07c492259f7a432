"""Dense-exponent polynomial arrays with exact differentiation.

A :class:`PolyArray` is a tensor of polynomials sharing one variable list.
Terms are stored as an integer exponent table ``exps`` of shape ``(T, V)``
and a coefficient table ``coef`` of shape ``(T, *shape)``, so evaluating all
components at ``N`` points costs one monomial table ``(N, T)`` and a
tensordot.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_TOKEN = re.compile(r"^\s*([A-Za-z]+)(\d*)\s*(?:\^\s*(\d+))?\s*$")


@dataclass(frozen=True)
class PolyArray:
    variables: tuple[str, ...]
    exps: np.ndarray
    coef: np.ndarray
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        exps = np.asarray(self.exps, dtype=np.int64).reshape(-1, len(self.variables))
        coef = np.asarray(self.coef, dtype=float).reshape((exps.shape[0],) + tuple(self.shape))
        if np.any(exps < 0):
            raise ValueError("negative exponent")
        if not np.all(np.isfinite(coef)):
            raise ValueError("non-finite coefficient")
        object.__setattr__(self, "exps", exps)
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "shape", tuple(self.shape))

    # construction ---------------------------------------------------------

    @classmethod
    def zeros(cls, variables: Sequence[str], shape: tuple[int, ...] = ()) -> "PolyArray":
        return cls(tuple(variables), np.zeros((0, len(variables)), dtype=np.int64), np.zeros((0,) + shape), shape)

    @classmethod
    def constant(cls, variables: Sequence[str], value) -> "PolyArray":
        value = np.asarray(value, dtype=float)
        return cls(tuple(variables), np.zeros((1, len(variables)), dtype=np.int64), value[None], value.shape)

    @classmethod
    def from_monomials(cls, variables: Sequence[str], monomials: Iterable[tuple[str, float]]) -> "PolyArray":
        """Scalar polynomial from ``(vars_string, coeff)`` pairs, e.g. ``("x*m^2", 0.5)``."""
        variables = tuple(variables)
        rows, coefs = [], []
        for spec, c in monomials:
            rows.append(parse_monomial(spec, variables))
            coefs.append(float(c))
        if not rows:
            return cls.zeros(variables)
        return cls(variables, np.array(rows), np.array(coefs)).simplify()

    @classmethod
    def stack(cls, polys: Sequence["PolyArray"]) -> "PolyArray":
        """Stack equally shaped polynomials along a new leading output axis."""
        if not polys:
            raise ValueError("nothing to stack")
        variables = polys[0].variables
        inner = polys[0].shape
        k = len(polys)
        exps, coefs = [], []
        for i, p in enumerate(polys):
            if p.variables != variables or p.shape != inner:
                raise ValueError("incompatible polynomials in stack")
            c = np.zeros((p.exps.shape[0], k) + inner)
            c[:, i] = p.coef
            exps.append(p.exps)
            coefs.append(c)
        return cls(variables, np.concatenate(exps), np.concatenate(coefs), (k,) + inner).simplify()

    # algebra ---------------------------------------------------------------

    def simplify(self) -> "PolyArray":
        if self.exps.shape[0] == 0:
            return self
        uniq, inv = np.unique(self.exps, axis=0, return_inverse=True)
        inv = np.asarray(inv).reshape(-1)
        coef = np.zeros((uniq.shape[0],) + self.shape)
        np.add.at(coef, inv, self.coef)
        flat = coef.reshape(coef.shape[0], -1)
        keep = np.any(flat != 0.0, axis=1)
        return PolyArray(self.variables, uniq[keep], coef[keep], self.shape)

    def diff(self, var: int | str) -> "PolyArray":
        i = self.variables.index(var) if isinstance(var, str) else int(var)
        mask = self.exps[:, i] > 0
        exps = self.exps[mask].copy()
        power = exps[:, i].astype(float)
        exps[:, i] -= 1
        coef = self.coef[mask] * power.reshape((-1,) + (1,) * len(self.shape))
        return PolyArray(self.variables, exps, coef, self.shape).simplify()

    def jacobian(self, indices: Sequence[int]) -> "PolyArray":
        """Derivatives w.r.t. ``indices`` stacked on a new trailing axis."""
        indices = list(indices)
        q = len(indices)
        exps, coefs = [], []
        for slot, i in enumerate(indices):
            d = self.diff(i)
            c = np.zeros((d.exps.shape[0],) + self.shape + (q,))
            c[..., slot] = d.coef
            exps.append(d.exps)
            coefs.append(c)
        if q == 0 or sum(e.shape[0] for e in exps) == 0:
            return PolyArray.zeros(self.variables, self.shape + (q,))
        return PolyArray(self.variables, np.concatenate(exps), np.concatenate(coefs), self.shape + (q,)).simplify()

    @property
    def degree(self) -> int:
        return int(self.exps.sum(axis=1).max()) if self.exps.shape[0] else 0

    def depends_on(self, indices: Sequence[int]) -> bool:
        if self.exps.shape[0] == 0:
            return False
        return bool(np.any(self.exps[:, list(indices)] > 0))

    # evaluation ------------------------------------------------------------

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluate at points ``z`` of shape ``(N, V)`` (or ``(V,)``)."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        z2 = z[None] if single else z
        if self.exps.shape[0] == 0:
            out = np.zeros((z2.shape[0],) + self.shape)
        else:
            mon = _monomials(z2, self.exps)
            out = np.tensordot(mon, self.coef, axes=(1, 0))
        return out[0] if single else out


def _monomials(z: np.ndarray, exps: np.ndarray) -> np.ndarray:
    n, v = z.shape
    mon = np.ones((n, exps.shape[0]))
    for j in range(v):
        col = exps[:, j]
        if not np.any(col):
            continue
        zj = z[:, j : j + 1]
        for p in np.unique(col[col > 0]):
            sel = col == p
            mon[:, sel] *= zj**p
    return mon


def parse_monomial(spec: str, variables: Sequence[str]) -> np.ndarray:
    """Parse ``"x*m^2*v"`` into an exponent row over ``variables``.

    Bare family names (``x``, ``m``, ``v``) mean index 0 of that family;
    ``"1"`` or ``""`` is the constant monomial.
    """
    row = np.zeros(len(variables), dtype=np.int64)
    spec = spec.strip()
    if spec in ("", "1"):
        return row
    for tok in spec.split("*"):
        match = _TOKEN.match(tok)
        if match is None:
            raise ValueError(f"cannot parse monomial factor {tok!r} in {spec!r}")
        name, idx, power = match.groups()
        if name == "t":
            full = "t"
        else:
            full = f"{name}{idx or 0}"
        if full not in variables:
            raise ValueError(f"unknown variable {tok.strip()!r} in {spec!r}; known: {list(variables)}")
        row[variables.index(full)] += int(power) if power else 1
    return row


def format_monomial(row: Sequence[int], variables: Sequence[str]) -> str:
    parts = []
    for e, name in zip(row, variables):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts) or "1"
