"""A candidate that the first-order test rejects, with a witness.

Running cost (v - 1)^2 and drift v: at u = 0 switching to v = 1 lowers the
Hamiltonian by roughly 1 - p_t, so the report names v = 1 and the
knot where the drop is largest.
"""

from __future__ import annotations

from mfsmp import TimeGrid, get_fixture, simulate
from mfsmp.adjoint import solve_adjoints
from mfsmp.smp import check_candidate

fx = get_fixture("suboptimal")
ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 100), 4000, seed=1)
rep = check_candidate(fx.spec, ens, solve_adjoints(fx.spec, ens), u_point=[0.0])
knot, v = rep.first.witness
print(f"violation {rep.first.value:.3f} at knot {knot} (t={rep.knots[knot]:.2f}) for v={v}")
print("exit code the CLI would return:", rep.exit_code)
for g in rep.gaps:
    print(f"v={g.v[0]:+.0f}: mean gap at t=0 {g.mean[0]:+.3f}, at t=0.99 {g.mean[-1]:+.3f}")
