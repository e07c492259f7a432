"""A singular mean-field problem where the first-order test says nothing.

Under u = 0 every particle stays at 1, the cost is 0 and the Hamiltonian
is flat in the control, so every control on the grid passes the
first-order test.  The second-order condition still separates them: its
value at v is P_t v^2 with P_t > 0.
"""

from __future__ import annotations

import numpy as np

from mfsmp import TimeGrid, get_fixture, simulate
from mfsmp.adjoint import second_order_ode_oracle, solve_adjoints
from mfsmp.fixtures import example11_p_closed_form
from mfsmp.smp import check_candidate, cost, second_order_condition

fx = get_fixture("example11")
grid = TimeGrid(fx.spec.T, 100)
ens = simulate(fx.spec, fx.candidate, grid, 10_000, seed=42)
print("max |X - 1|      :", np.abs(ens.paths - 1).max())
print("J(u)             :", cost(fx.spec, ens)[0])

adj = solve_adjoints(fx.spec, ens)
rep = check_candidate(fx.spec, ens, adj, u_point=[0.0])
print("first-order flag :", rep.first.significant)
print("singular pairs   :", len(rep.region.pairs), "of", grid.M * 3)

for v in (-1.0, -0.5, 0.5, 1.0):
    c = second_order_condition(fx.spec, ens, adj, [v])
    print(f"second-order value at v={v:+.1f}, t=0: {c.mean[0]:9.3f}")

# the second-order adjoint against a deterministic ODE solve along X = 1
t = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
P_mc = adj.P[np.round(t * grid.M).astype(int), :, 0, 0].mean(axis=1)
P_ode = second_order_ode_oracle(fx.spec, [1.0], [0.0], t)[:, 0, 0]
print("\n   t   particle P    ODE P    4exp(4(T-t))")
for row in zip(t, P_mc, P_ode, example11_p_closed_form(t)):
    print("{:5.2f} {:11.3f} {:9.3f} {:12.3f}".format(*row))
