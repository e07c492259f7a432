"""Copy-variable expectations over a particle cloud.

``Copies.tilde(a)`` stands for the independent-copy expectation of a
per-particle quantity ``a`` (leading axis = particles).  In ``exact`` mode
it is the full ensemble average (shape ``(1, ...)``, broadcasting against
particle arrays).  Because every coefficient is moment-coupled, nested
copy averages factor into products of such single averages, so exact mode
costs O(N) per term.  ``reindex`` mode instead gathers ``a`` along a
random permutation, one per copy space.
"""

from __future__ import annotations

import numpy as np

from .rng import permutation

MODES = ("exact", "reindex")


class Copies:
    def __init__(self, mode: str = "exact", N: int | None = None, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"copy mode must be one of {MODES}")
        self.mode = mode
        if mode == "reindex":
            if N is None:
                raise ValueError("reindex mode needs the particle count")
            self._tilde = permutation(seed, 1, N)
            self._bar = permutation(seed, 2, N)

    def tilde(self, a: np.ndarray) -> np.ndarray:
        if self.mode == "exact":
            return a.mean(axis=0, keepdims=True)
        return a[self._tilde]

    def bar(self, a: np.ndarray) -> np.ndarray:
        if self.mode == "exact":
            return a.mean(axis=0, keepdims=True)
        return a[self._bar]


class CloudTables:
    """Partial tables of one coefficient on a cloud, plus its basis derivatives.

    Shapes (``o`` = output axes of the coefficient, ``k`` moments, ``n`` state):
    ``phi (N,*o)``, ``phi_x (N,*o,n)``, ``phi_m (N,*o,k)``, ``phi_xx (N,*o,n,n)``,
    ``phi_xm (N,*o,n,k)``, ``phi_mm (N,*o,k,k)``; ``gh (N,k,n)``, ``hh (N,k,n,n)``.
    """

    def __init__(self, f, t: float, x: np.ndarray, v: np.ndarray | None, names=None, moments=None):
        self.f = f
        self.m = f.basis.values(x).mean(axis=0) if moments is None else moments
        names = names or ("phi", "phi_x", "phi_m", "phi_xx", "phi_xm", "phi_mm")
        self.tab = f.tables(t, x, self.m, v, names)
        self.gh = f.basis.grad(x)
        self.hh = f.basis.hess(x)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tab[name]


def grad_pair(gh: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``grad h_i(X^l) . z^l`` per particle, shape ``(N, k)``."""
    return np.einsum("jkn,jn->jk", gh, z)


def hess_pair(hh: np.ndarray, z: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """``z^T hess h_i w`` per particle, shape ``(N, k)``."""
    w = z if w is None else w
    return np.einsum("jkab,ja,jb->jk", hh, z, w)


def mu_apply(phi_m: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Contract the moment axis of ``phi_m (N,*o,k)`` with ``G (N|1,k)``."""
    extra = phi_m.ndim - 2
    Gb = G.reshape(G.shape[0], *([1] * extra), G.shape[1])
    return (phi_m * Gb).sum(axis=-1)
