"""Fixture documents: TOML text <-> nested dicts <-> :class:`Fixture`.

Schema (all sections except ``[moments]``, ``[candidate]`` and
``[alternative]`` are required)::

    name = "example11"
    [dims]          n, d, k          # state, noise, control dimensions
    [horizon]       T, x0 = [...]
    [moments]       h = [ [ {vars="x", coeff=1.0} ], ... ]   # default: identity
    [drift]         components = [ [monomial, ...] ] * n      # or monomials = [...] when n = 1
    [diffusion]     rows = [ [ [monomial, ...] ] * d ] * n    # or monomials = [...] when n = d = 1
    [running_cost]  monomials = [...]
    [terminal_cost] monomials = [...]
    [controls]      kind = "finite", points = [[...], ...]
                    kind = "box", lo = [...], hi = [...], grid = 5
    [candidate]     constant = [...]
                    feedback = [ [monomial, ...] ] * k, clip = [lo, hi]   # vars t, x0..
    [alternative]   constant = [...]

A monomial is ``{vars = "x*m^2*v", coeff = 0.5}``; ``vars = "1"`` is the
constant.  Bare family names mean index 0 (``x`` is ``x0``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .forward import ControlProcess
from .measure import MomentBasis
from .poly import PolyArray
from .problem import ControlSet, ProblemSpec, make_coefficient


@dataclass
class Fixture:
    spec: ProblemSpec
    candidate: ControlProcess
    alternative: ControlProcess | None
    doc: dict

    @property
    def name(self) -> str:
        return self.spec.name


def _pairs(monomials) -> list[tuple[str, float]]:
    return [(str(m["vars"]), float(m["coeff"])) for m in monomials]


def _section(doc, key):
    try:
        return doc[key]
    except KeyError:
        raise ValueError(f"fixture is missing the [{key}] section") from None


def fixture_from_doc(doc: dict) -> Fixture:
    dims = _section(doc, "dims")
    n, d, kc = int(dims["n"]), int(dims["d"]), int(dims["k"])
    hor = _section(doc, "horizon")
    mom = doc.get("moments")
    basis = MomentBasis.from_monomials(n, [_pairs(h) for h in mom["h"]]) if mom else MomentBasis.identity(n)

    drift = _section(doc, "drift")
    comps = drift.get("components", [drift["monomials"]] if "monomials" in drift else None)
    diff = _section(doc, "diffusion")
    rows = diff.get("rows", [[diff["monomials"]]] if "monomials" in diff else None)
    if comps is None or rows is None:
        raise ValueError("drift needs components (or monomials) and diffusion needs rows (or monomials)")
    b = make_coefficient("drift", [_pairs(c) for c in comps], n, kc, basis, (n,))
    sigma = make_coefficient("diffusion", [[_pairs(c) for c in row] for row in rows], n, kc, basis, (n, d))
    h = make_coefficient("running_cost", _pairs(_section(doc, "running_cost").get("monomials", [])), n, kc, basis)
    Phi = make_coefficient("terminal_cost", _pairs(_section(doc, "terminal_cost").get("monomials", [])), n, kc, basis)

    ctl = _section(doc, "controls")
    if ctl["kind"] == "finite":
        controls = ControlSet.finite(np.asarray(ctl["points"], dtype=float).reshape(-1, kc))
    elif ctl["kind"] == "box":
        controls = ControlSet.box(ctl["lo"], ctl["hi"], int(ctl.get("grid", 5)))
    else:
        raise ValueError(f"unknown controls kind {ctl['kind']!r}")

    spec = ProblemSpec(b, sigma, h, Phi, controls, np.asarray(hor["x0"], dtype=float), float(hor["T"]), str(doc.get("name", "fixture")))
    candidate = _control_from(doc.get("candidate", {"constant": [0.0] * kc}), n, kc)
    alt = doc.get("alternative")
    return Fixture(spec, candidate, None if alt is None else _control_from(alt, n, kc), copy.deepcopy(doc))


def _control_from(sec: dict, n: int, kc: int) -> ControlProcess:
    if "constant" in sec:
        return ControlProcess.const(np.asarray(sec["constant"], dtype=float).reshape(kc))
    if "feedback" in sec:
        variables = ("t",) + tuple(f"x{i}" for i in range(n))
        poly = PolyArray.stack([PolyArray.from_monomials(variables, _pairs(c)) for c in sec["feedback"]])
        clip = sec.get("clip")
        return ControlProcess(feedback=poly, clip=None if clip is None else (float(clip[0]), float(clip[1])))
    raise ValueError("control section needs constant or feedback")


def load_fixture(path) -> Fixture:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read fixture {path}: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValueError(f"malformed fixture {path}: {exc}") from exc
    return fixture_from_doc(doc)


# --- writer ---------------------------------------------------------------------


def _value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_value(x)}" for k, x in v.items()) + " }"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps_fixture(doc: dict) -> str:
    """TOML text for a fixture document; ``tomli.loads`` inverts it."""
    lines = []
    for key, val in doc.items():
        if not isinstance(val, dict):
            lines.append(f"{key} = {_value(val)}")
    for key, val in doc.items():
        if isinstance(val, dict):
            lines.append("")
            lines.append(f"[{key}]")
            lines.extend(f"{k} = {_value(x)}" for k, x in val.items())
    return "\n".join(lines) + "\n"


def dump_fixture(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(dumps_fixture(doc))
    return path
