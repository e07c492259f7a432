"""Built-in fixture documents.

Each builder returns a plain dict in the :mod:`mfsmp.config` schema;
:func:`get_fixture` turns it into a :class:`~mfsmp.config.Fixture`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import Fixture, fixture_from_doc


def _m(vars_: str, coeff: float) -> dict:
    return {"vars": vars_, "coeff": float(coeff)}


def _doc(name, *, n=1, d=1, k=1, T=1.0, x0=(0.0,), drift, diffusion, running=(), terminal=(), controls, candidate=(0.0,), alternative=None, moments=None):
    doc = {
        "name": name,
        "dims": {"n": n, "d": d, "k": k},
        "horizon": {"T": float(T), "x0": [float(a) for a in x0]},
    }
    if moments is not None:
        doc["moments"] = {"h": moments}
    doc["drift"] = {"components": drift}
    doc["diffusion"] = {"rows": diffusion}
    doc["running_cost"] = {"monomials": list(running)}
    doc["terminal_cost"] = {"monomials": list(terminal)}
    doc["controls"] = controls
    doc["candidate"] = candidate if isinstance(candidate, dict) else {"constant": [float(a) for a in candidate]}
    if alternative is not None:
        doc["alternative"] = {"constant": [float(a) for a in alternative]}
    return doc


def _finite(*pts) -> dict:
    return {"kind": "finite", "points": [[float(p)] for p in pts]}


def example11(T: float = 1.0) -> dict:
    """Singular mean-field problem: ``dX = v dt + ((X-1) + (E X - 1)) dB``, ``J = E Phi``.

    ``Phi = ((x-1) + (m-1))^2 / 2`` with ``m`` the mean; ``u = 0`` keeps
    ``X = 1`` and ``J(u) = 0``.
    """
    return _doc(
        "example11",
        T=T,
        x0=(1.0,),
        drift=[[_m("v", 1)]],
        diffusion=[[[_m("x", 1), _m("m", 1), _m("1", -2)]]],
        terminal=[_m("x^2", 0.5), _m("m^2", 0.5), _m("x*m", 1), _m("x", -2), _m("m", -2), _m("1", 2)],
        controls=_finite(-1, 0, 1),
        candidate=(0.0,),
        alternative=(1.0,),
    )


def example11_concave(T: float = 1.0) -> dict:
    """:func:`example11` with the terminal cost negated: still singular, but ``u = 0`` maximizes."""
    doc = example11(T)
    doc["name"] = "example11_concave"
    doc["terminal_cost"] = {"monomials": [_m(m["vars"], -m["coeff"]) for m in doc["terminal_cost"]["monomials"]]}
    return doc


def zero() -> dict:
    return _doc("zero", drift=[[]], diffusion=[[[]]], controls=_finite(-1, 0, 1), alternative=(1.0,))


def linear(c: float = 0.5) -> dict:
    """``b = v``, ``sigma = c``, ``h = x``, ``Phi = 0``: ``p_t = T - t``, ``q = 0``."""
    return _doc("linear", drift=[[_m("v", 1)]], diffusion=[[[_m("1", c)]]], running=[_m("x", 1)], controls=_finite(-1, 0, 1), alternative=(1.0,))


def scalar_riccati(a: float = 1.0) -> dict:
    """``b = 0``, ``sigma = a x``, ``h = x^2/2``, ``Phi = 0``, ``x0 = 1``: ``P_t = (exp(a^2 (T-t)) - 1) / a^2``."""
    return _doc("scalar_riccati", x0=(1.0,), drift=[[]], diffusion=[[[_m("x", a)]]], running=[_m("x^2", 0.5)], controls=_finite(0))


def nonsingular(c: float = 0.5) -> dict:
    """``b = v``, ``sigma = c``, ``h = x + v^2``: ``p = T - t`` and ``dH(t; 1) = p_t + 1``."""
    return _doc(
        "nonsingular",
        drift=[[_m("v", 1)]],
        diffusion=[[[_m("1", c)]]],
        running=[_m("x", 1), _m("v^2", 1)],
        controls=_finite(0, 1),
        alternative=(1.0,),
    )


def unit_costate(c: float = 0.5) -> dict:
    """``b = v``, ``h = v^2``, ``Phi = x``: ``p = 1`` and ``dH(t; 1) = 2``."""
    return _doc("unit_costate", drift=[[_m("v", 1)]], diffusion=[[[_m("1", c)]]], running=[_m("v^2", 1)], terminal=[_m("x", 1)], controls=_finite(0, 1), alternative=(1.0,))


def suboptimal(c: float = 0.5) -> dict:
    """``b = v``, ``h = (v - 1)^2`` at ``u = 0``; ``v = 1`` lowers the Hamiltonian by 1."""
    return _doc(
        "suboptimal",
        drift=[[_m("v", 1)]],
        diffusion=[[[_m("1", c)]]],
        running=[_m("v^2", 1), _m("v", -2), _m("1", 1)],
        controls=_finite(-1, 0, 1),
        alternative=(1.0,),
    )


def kernel(c: float = 0.2) -> dict:
    """``b = v + x``, ``h = x v / 2``, ``U = {0, 2}``: ``P = 0``, ``dH_x = 1``, ``db = 2``."""
    return _doc("kernel", drift=[[_m("v", 1), _m("x", 1)]], diffusion=[[[_m("1", c)]]], running=[_m("x*v", 0.5)], controls=_finite(0, 2), alternative=(2.0,))


def quadratic(c: float = 0.2) -> dict:
    """``b = v + x^2 / 2``, ``sigma = c``, no costs and no mean field."""
    return _doc("quadratic", drift=[[_m("v", 1), _m("x^2", 0.5)]], diffusion=[[[_m("1", c)]]], controls=_finite(0, 1), alternative=(1.0,))


def affine(c: float = 0.3) -> dict:
    """Affine mean-field dynamics: ``b = v + x/2 - m/3``, ``sigma = c + x/5 + m/10``."""
    return _doc(
        "affine",
        x0=(0.5,),
        drift=[[_m("v", 1), _m("x", 0.5), _m("m", -1 / 3)]],
        diffusion=[[[_m("1", c), _m("x", 0.2), _m("m", 0.1)]]],
        running=[_m("x^2", 0.5), _m("v^2", 0.5)],
        controls=_finite(0, 1),
        alternative=(1.0,),
    )


def cubic_blowup(x0: float = 10.0) -> dict:
    """``b = x^3`` from ``x0 = 10``: the Euler map overflows within a few steps at ``dt = 0.01``."""
    return _doc("cubic_blowup", x0=(x0,), drift=[[_m("x^3", 1)]], diffusion=[[[]]], controls=_finite(0))


def lq(c: float = 0.3, g: float = 1.0, bound: float = 3.0, grid: int = 7) -> dict:
    """``b = v``, ``h = (x^2 + v^2)/2``, ``Phi = g x^2 / 2`` with the Riccati feedback ``u = -K x``.

    ``K' = K^2 - 1``, ``K(T) = g``; ``g = 1`` gives ``K = 1``.  The feedback is
    clipped to the control box.
    """
    if g != 1.0:
        raise ValueError("the shipped feedback is closed-form only for g = 1")
    return _doc(
        "lq",
        x0=(0.5,),
        drift=[[_m("v", 1)]],
        diffusion=[[[_m("1", c)]]],
        running=[_m("x^2", 0.5), _m("v^2", 0.5)],
        terminal=[_m("x^2", 0.5 * g)],
        controls={"kind": "box", "lo": [-bound], "hi": [bound], "grid": grid},
        candidate={"feedback": [[_m("x", -1.0)]], "clip": [-bound, bound]},
    )


def ito_drift() -> dict:
    """``b = 1``, ``sigma = 0`` from ``x0 = 0``."""
    return _doc("ito_drift", drift=[[_m("1", 1)]], diffusion=[[[]]], controls=_finite(0))


def ito_noise() -> dict:
    """``b = 0``, ``sigma = 1`` from ``x0 = 0``."""
    return _doc("ito_noise", drift=[[]], diffusion=[[[_m("1", 1)]]], controls=_finite(0))


BUILTIN: dict[str, Callable[[], dict]] = {
    "example11": example11,
    "example11_concave": example11_concave,
    "zero": zero,
    "linear": linear,
    "scalar_riccati": scalar_riccati,
    "nonsingular": nonsingular,
    "unit_costate": unit_costate,
    "suboptimal": suboptimal,
    "kernel": kernel,
    "quadratic": quadratic,
    "affine": affine,
    "cubic_blowup": cubic_blowup,
    "lq": lq,
    "ito_drift": ito_drift,
    "ito_noise": ito_noise,
}


def get_fixture(name: str, **kwargs) -> Fixture:
    try:
        builder = BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {sorted(BUILTIN)}") from None
    return fixture_from_doc(builder(**kwargs))


def example11_p_closed_form(t, T: float = 1.0) -> np.ndarray:
    """``P_t = 4 exp(4 (T - t))``: the second-order adjoint of :func:`example11` along ``X = 1``."""
    return 4.0 * np.exp(4.0 * (T - np.asarray(t, dtype=float)))
