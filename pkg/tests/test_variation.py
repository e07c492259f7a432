from __future__ import annotations

import numpy as np
import pytest

from mfsmp.config import fixture_from_doc
from mfsmp.fixtures import _doc, _m, get_fixture
from mfsmp.forward import ControlProcess, TimeGrid, simulate
from mfsmp.variation import (
    control_distance,
    decreasing_within_se,
    drift_jumps,
    finest_partition,
    first_variation,
    fit_slope,
    leading_spike_steps,
    order_study,
    partition_spike_set,
    read_convergence_csv,
    refining_partition,
    remainder,
    representation,
    spike_control,
    transition_matrix,
    uniform_partition,
    variations,
    write_convergence_csv,
)

G100 = TimeGrid(1.0, 100)


def _fixture(name, **kw):
    doc = _doc(name, controls={"kind": "finite", "points": [[0.0], [1.0]]}, alternative=(1.0,), **kw)
    return fixture_from_doc(doc)


# --- distances and spike sets ------------------------------------------------


def test_control_distance_cases():
    u, v = ControlProcess.const([0.0]), ControlProcess.const([1.0])
    assert control_distance(u, u, G100, 3) == 0.0
    assert control_distance(u, v, G100, 3) == pytest.approx(1.0)
    w = spike_control(u, v, range(25), G100, 3)
    assert abs(control_distance(u, w, G100, 3) - 0.25) <= G100.dt


def test_spike_control_extremes(ex11):
    u, v = ex11.candidate, ex11.alternative
    N = 4
    ua, va = u.realize(G100, N), v.realize(G100, N)
    assert np.array_equal(spike_control(u, v, [], G100, N).values, ua)
    assert np.array_equal(spike_control(u, v, range(100), G100, N).values, va)
    s = spike_control(u, v, range(10), G100, N).values
    assert np.all(s[:10] == 1.0) and np.all(s[10:] == 0.0)


def test_spike_control_out_of_range():
    with pytest.raises(ValueError):
        spike_control(ControlProcess.const([0.0]), ControlProcess.const([1.0]), [100], G100, 2)


def test_partition_spike_sets():
    g10 = TimeGrid(1.0, 10)
    assert partition_spike_set(g10, 0.5, [0.0, 1.0]).tolist() == [0, 1, 2, 3, 4]
    steps = partition_spike_set(G100, 0.1, uniform_partition(G100, 10))
    assert steps.tolist() == list(range(0, 100, 10))
    assert len(steps) * G100.dt == pytest.approx(0.1)
    g80 = TimeGrid(1.0, 80)
    steps = partition_spike_set(g80, 0.25, uniform_partition(g80, 10))
    assert all(sorted(steps[steps // 8 == c] % 8) == [0, 1] for c in range(10))


def test_partition_must_refine_grid():
    with pytest.raises(ValueError):
        partition_spike_set(G100, 0.5, [0.0, 0.005, 1.0])
    with pytest.raises(ValueError):
        partition_spike_set(G100, 1.5, [0.0, 1.0])


@pytest.mark.parametrize("rho,cell", [(0.4, 5), (0.2, 5), (0.1, 10), (0.05, 20), (0.25, 4)])
def test_finest_partition_cells(rho, cell):
    knots = finest_partition(G100, rho)
    assert np.allclose(np.diff(knots), cell * G100.dt)
    assert len(partition_spike_set(G100, rho, knots)) == round(rho * 100)


def test_refining_partition_cell_counts():
    assert len(refining_partition(G100, 0.4, 0.4)) - 1 == 1
    assert len(refining_partition(G100, 0.05, 0.4)) - 1 == 5  # 8 cells do not divide 100 steps exactly


def test_leading_spike_steps():
    assert leading_spike_steps(G100, 0.05).tolist() == list(range(5))
    with pytest.raises(ValueError):
        leading_spike_steps(G100, 0.001)


# --- variation processes -------------------------------------------------------


def test_no_spike_gives_zero_variations():
    fx = get_fixture("affine")
    ens = simulate(fx.spec, fx.candidate, G100, 200, 0)
    x1, x2 = variations(fx.spec, ens, fx.candidate)
    assert np.all(x1 == 0) and np.all(x2 == 0)
    assert np.all(remainder(ens, ens, x1, x2) == 0)


def test_example11_first_variation_mean(ex11_run, ex11):
    ens, _ = ex11_run
    N = ens.N
    for rho in (0.4, 0.1):
        vhat = spike_control(ens.controls, ex11.alternative.realize(G100, N), leading_spike_steps(G100, rho), G100, N)
        x1, x2 = variations(ex11.spec, ens, vhat)
        assert abs(x1[-1].mean() - rho) <= G100.dt + 3 / np.sqrt(N)
        assert np.all(x2 == 0)


def test_pure_integral_first_variation():
    fx = get_fixture("linear")
    ens = simulate(fx.spec, fx.candidate, G100, 20, 0)
    steps = [3, 4, 10, 50]
    vhat = spike_control(ens.controls, fx.alternative.realize(G100, 20), steps, G100, 20)
    x1 = first_variation(fx.spec, ens, vhat)
    expected = np.array([sum(s < m for s in steps) for m in range(101)]) * G100.dt
    np.testing.assert_allclose(x1[:, :, 0], np.broadcast_to(expected[:, None], (101, 20)), atol=1e-15)


def test_quadratic_flow_second_order_taylor():
    fx = get_fixture("quadratic", c=0.0)
    g = TimeGrid(1.0, 400)
    ens = simulate(fx.spec, fx.candidate, g, 2, 0)
    ds, rem = [], []
    for d in (0.2, 0.1, 0.05, 0.025):
        vhat = spike_control(ens.controls, fx.alternative.realize(g, 2), leading_spike_steps(g, d), g, 2)
        ens_v = simulate(fx.spec, vhat, g, 2, 0, noise=ens.noise)
        x1, x2 = variations(fx.spec, ens, vhat)
        ds.append(d)
        rem.append(abs(remainder(ens_v, ens, x1, x2)[-1, 0, 0]))
    assert fit_slope(ds, rem) >= 2.7


def test_affine_remainder_vanishes():
    fx = get_fixture("affine")
    ens = simulate(fx.spec, fx.candidate, G100, 500, 1)
    vhat = spike_control(ens.controls, fx.alternative.realize(G100, 500), range(30), G100, 500)
    ens_v = simulate(fx.spec, vhat, G100, 500, 1, noise=ens.noise)
    x1, x2 = variations(fx.spec, ens, vhat)
    assert np.max(np.abs(remainder(ens_v, ens, x1, x2))) <= 1e-12


def test_reindex_copies_close_to_exact():
    from mfsmp._copies import Copies

    fx = get_fixture("affine")
    ens = simulate(fx.spec, fx.candidate, G100, 4000, 2)
    vhat = spike_control(ens.controls, fx.alternative.realize(G100, 4000), range(20), G100, 4000)
    exact = first_variation(fx.spec, ens, vhat)
    reidx = first_variation(fx.spec, ens, vhat, Copies("reindex", 4000, 2))
    # copy terms enter through means, so only the particle mean is comparable
    assert abs(exact[-1].mean() - reidx[-1].mean()) <= 0.02 * abs(exact[-1].mean())


# --- transition matrix -----------------------------------------------------------


def test_transition_identity_without_linear_terms():
    fx = get_fixture("linear")
    ens = simulate(fx.spec, fx.candidate, G100, 10, 0)
    tr = transition_matrix(fx.spec, ens)
    assert np.all(tr.phi == 1.0) and np.all(tr.psi == 1.0)


def test_transition_deterministic_exponential():
    a = 0.7
    fx = _fixture("growth", drift=[[_m("x", a), _m("v", 1)]], diffusion=[[[]]])
    ens = simulate(fx.spec, fx.candidate, G100, 3, 0)
    tr = transition_matrix(fx.spec, ens)
    np.testing.assert_allclose(tr.phi[:, 0, 0, 0], np.exp(a * G100.knots), rtol=a * a * G100.dt)


def test_example11_inverse_consistency(ex11):
    g = TimeGrid(1.0, 1000)
    ens = simulate(ex11.spec, ex11.candidate, g, 10_000, 42)
    tr = transition_matrix(ex11.spec, ens)
    # the Euler inverse is exact only in mean; the particle mean carries O(1/sqrt(N)) noise
    assert tr.inverse_error <= 5e-3


def test_representation_matches_first_variation_deterministic():
    fx = _fixture("growth", drift=[[_m("x", 0.5), _m("v", 1)]], diffusion=[[[]]])
    g = TimeGrid(1.0, 2000)
    ens = simulate(fx.spec, fx.candidate, g, 2, 0)
    vhat = spike_control(ens.controls, fx.alternative.realize(g, 2), range(0, 2000, 4), g, 2)
    x1 = first_variation(fx.spec, ens, vhat)
    z = representation(transition_matrix(fx.spec, ens), drift_jumps(fx.spec, ens, vhat), g.dt)
    assert np.max(np.abs(x1 - z)) <= 5 * g.dt


# --- order studies ------------------------------------------------------------------


def test_affine_order_study_passes_trivially():
    fx = get_fixture("affine")
    st = order_study(fx.spec, fx.candidate, fx.alternative, N=2000, seed=0)
    assert st.is_zero("x2") and st.is_zero("xstar") and st.passed


def test_injected_x2_fails_threshold():
    fx = get_fixture("quadratic")
    st = order_study(fx.spec, fx.candidate, fx.alternative, N=2000, seed=0, inject_x2=1.0)
    assert not st.checks["x2_slope"] and not st.passed


def test_order_study_needs_four_rungs():
    fx = get_fixture("affine")
    with pytest.raises(ValueError):
        order_study(fx.spec, fx.candidate, fx.alternative, d_ladder=(0.4, 0.2, 0.1), N=100)


def test_decreasing_within_se():
    assert decreasing_within_se([3.0, 2.0, 2.5], [0.1, 0.1, 0.6])
    assert not decreasing_within_se([3.0, 2.0, 2.5], [0.1, 0.1, 0.1])


def test_fit_slope_exact_power():
    d = np.array([0.4, 0.2, 0.1, 0.05])
    assert fit_slope(d, 3 * d**2) == pytest.approx(2.0)


def test_convergence_csv_roundtrip(tmp_path):
    fx = get_fixture("quadratic")
    st = order_study(fx.spec, fx.candidate, fx.alternative, N=200, seed=0)
    path = write_convergence_csv([st], tmp_path / "c.csv")
    rows = read_convergence_csv(path)
    assert [(q, d, e, s) for _, q, d, e, s in rows] == st.rows
    assert path.read_bytes().count(b"\r") == 0
