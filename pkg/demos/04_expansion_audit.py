"""Fit J(v_rho) - J(u) = c1 rho + c2 rho^2 and compare with adjoint predictions.

For the nonsingular fixture both coefficients line up.  For the affine
mean-field fixture they line up too.  For the singular example c1 is
zero as it should be, but the predicted c2 is about four times the fitted
one.
"""

from __future__ import annotations

from mfsmp import get_fixture
from mfsmp.smp import expansion_audit

for name in ("nonsingular", "affine", "example11"):
    fx = get_fixture(name)
    a = expansion_audit(fx.spec, fx.candidate, fx.alternative, N=10_000, seed=42)
    print(f"{name:12s} c1 {a.c1:+.4f} (pred {a.c1_pred:+.4f})   c2 {a.c2:+.4f} (pred {a.c2_pred:+.4f})   {a.checks}")
