"""How fast the variation processes shrink with the spike length.

E sup|x1|^2 should scale like d^2 and E sup|x2|^2 like d^4; the remainder
after both terms, divided by d^4, should fall along the ladder.
"""

from __future__ import annotations

from mfsmp import get_fixture
from mfsmp.variation import order_study

for name in ("example11", "quadratic"):
    fx = get_fixture(name)
    st = order_study(fx.spec, fx.candidate, fx.alternative, N=10_000, seed=42)
    print(f"\n{name}")
    for q in ("x1", "x2", "xstar"):
        est, _ = st.stats[q]
        slope = "identically zero" if st.is_zero(q) else f"slope {st.slope(q):.3f}"
        print(f"  {q:5s} " + "  ".join(f"{e:.3e}" for e in est) + f"   {slope}")
    print("  checks:", st.checks)
