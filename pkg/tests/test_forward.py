from __future__ import annotations

import json

import numpy as np
import pytest

from mfsmp.config import fixture_from_doc
from mfsmp.fixtures import _doc, _m, get_fixture
from mfsmp.forward import (
    BlowUpError,
    ControlProcess,
    TimeGrid,
    moment_bound_check,
    read_paths_csv,
    simulate,
    write_paths_csv,
)
from mfsmp.problem import zero_problem


def test_zero_coefficients_keep_x0():
    spec = zero_problem(x0=[0.7])
    ens = simulate(spec, ControlProcess.const([0.0]), TimeGrid(1.0, 20), 5, 0)
    assert np.all(ens.paths == 0.7)


def test_example11_paths_exactly_one(ex11_run):
    ens, _ = ex11_run
    assert np.all(ens.paths == 1.0)


def test_unit_drift_integrates_to_one():
    fx = get_fixture("ito_drift")
    ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 100), 4, 0)
    assert np.max(np.abs(ens.paths[-1] - 1.0)) <= 1e-12


def test_bit_identical_reruns(ex11):
    fx = get_fixture("affine")
    g = TimeGrid(1.0, 30)
    a = simulate(fx.spec, fx.candidate, g, 200, 11)
    b = simulate(fx.spec, fx.candidate, g, 200, 11)
    assert np.array_equal(a.paths, b.paths) and np.array_equal(a.noise, b.noise)


def test_common_random_numbers_reused():
    fx = get_fixture("affine")
    g = TimeGrid(1.0, 30)
    a = simulate(fx.spec, fx.candidate, g, 100, 3)
    b = simulate(fx.spec, fx.alternative, g, 100, 999, noise=a.noise)
    assert np.array_equal(a.noise, b.noise)


def test_ensemble_read_only():
    fx = get_fixture("affine")
    ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 10), 10, 0)
    with pytest.raises(ValueError):
        ens.paths[0, 0, 0] = 1.0


def test_input_validation():
    spec = zero_problem()
    with pytest.raises(ValueError):
        simulate(spec, ControlProcess.const([0.0]), TimeGrid(1.0, 10), 1, 0)
    with pytest.raises(ValueError):
        simulate(spec, ControlProcess.const([0.0]), TimeGrid(2.0, 10), 4, 0)


def test_blow_up_reports_step_and_particle():
    fx = get_fixture("cubic_blowup")
    with pytest.raises(BlowUpError) as err:
        simulate(fx.spec, fx.candidate, TimeGrid(1.0, 100), 3, 0)
    assert 1 <= err.value.step <= 100 and err.value.particle == 0


def test_moment_ratio_constant_path():
    spec = zero_problem(x0=[1.0])
    ens = simulate(spec, ControlProcess.const([0.0]), TimeGrid(1.0, 10), 4, 0)
    assert moment_bound_check(ens).ratio == 0.5


def test_moment_ratio_example11(ex11_run):
    assert moment_bound_check(ex11_run[0]).ratio == 0.5


def _ratios(fx):
    out = []
    for N in (1000, 4000, 16000):
        ens = simulate(fx.spec, fx.alternative, TimeGrid(1.0, 100), N, 42)
        out.append(moment_bound_check(ens).ratio)
    return np.asarray(out)


def test_moment_ratio_stable_for_gaussian_paths():
    r = _ratios(get_fixture("linear"))
    assert np.all(np.isfinite(r)) and r.max() / r.min() - 1 <= 0.2


@pytest.mark.xfail(strict=True, reason="eighth moment of a geometric-type diffusion is dominated by rare paths; MC spread across N is far beyond 20%")
def test_moment_ratio_stable_example11(ex11):
    r = _ratios(ex11)
    assert np.all(np.isfinite(r))
    assert r.max() / r.min() - 1 <= 0.2


def test_feedback_control_clipped():
    fx = get_fixture("lq", bound=0.1)
    ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 20), 50, 0)
    assert np.all(np.abs(ens.controls) <= 0.1)
    assert np.all(ens.controls[0] == -0.1)  # x0 = 0.5 gives -0.5 before clipping


def test_mean_field_coupling_uses_same_ensemble():
    # b = -m with x0 = 1: every particle follows exp(-t) exactly (Euler: (1 - dt)^m)
    doc = _doc("mean_decay", x0=(1.0,), drift=[[_m("m", -1)]], diffusion=[[[]]], controls={"kind": "finite", "points": [[0.0]]})
    fx = fixture_from_doc(doc)
    g = TimeGrid(1.0, 50)
    ens = simulate(fx.spec, fx.candidate, g, 3, 0)
    np.testing.assert_allclose(ens.paths[:, 0, 0], (1 - g.dt) ** np.arange(51), rtol=1e-13)


def test_paths_csv_roundtrip(tmp_path):
    fx = get_fixture("affine")
    ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 7), 5, 2)
    path = write_paths_csv(ens, tmp_path / "paths.csv", spec_hash="abc")
    assert np.array_equal(read_paths_csv(path), ens.paths)
    meta = json.loads(path.with_suffix(".meta.json").read_text())
    assert meta == {"seed": 2, "N": 5, "M": 7, "T": 1.0, "n": 1, "spec_hash": "abc"}
    assert path.read_text().splitlines()[0] == "step,time,particle,coord,value"
