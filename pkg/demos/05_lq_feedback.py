"""Linear-quadratic sanity check with a state-feedback candidate.

With unit weights and terminal weight 1 the Riccati gain is constant at 1,
so the optimal feedback is u = -x and the costate equals the state.
"""

from __future__ import annotations

import numpy as np

from mfsmp import TimeGrid, get_fixture, simulate
from mfsmp.adjoint import solve_adjoints
from mfsmp.smp import check_candidate

fx = get_fixture("lq")
ens = simulate(fx.spec, fx.candidate, TimeGrid(1.0, 100), 10_000, seed=42)
adj = solve_adjoints(fx.spec, ens)
print("RMS |p - X|          :", float(np.sqrt(np.mean((adj.p - ens.paths) ** 2))))
rep = check_candidate(fx.spec, ens, adj)
print("first-order violation:", rep.first.value, "significant:", rep.first.significant)
