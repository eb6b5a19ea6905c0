"""Driftless market: the dual problem can be solved by hand.

With zero drift and no jumps the only local-martingale deflator is the
constant 1.  For the quadratic loss capped at H = 1 the dual function is
then v(y) = 1 - y + y^2 / 4 on [0, 2], and the budget z is matched by
y = 2(1 - z), giving maximal expected utility 1 - (1 - z)^2.

Run:  python3 demos/driftless_closed_form.py
"""

import numpy as np

from levydual.dual_solver import dual_value, outer_minimize
from levydual.market_model import LevyMarketSpec, simulate_paths
from levydual.utility import QuadraticLoss, make_shortfall_utility

spec = LevyMarketSpec(b=0.0, sigma=0.2)
utility = make_shortfall_utility(QuadraticLoss(), 1.0)
paths = simulate_paths(spec, n_steps=50, n_paths=20_000, seed=11)

print("dual function v(y)")
print(f"{'y':>6} {'estimate':>12} {'closed form':>12}")
for y in (0.25, 0.5, 1.0, 1.5, 2.0):
    _, (est, _) = dual_value(spec, utility, y, paths)
    print(f"{y:6.2f} {est:12.8f} {1 - y + y * y / 4:12.8f}")

print("\nouter problem")
for z in (0.25, 0.5, 0.9):
    res = outer_minimize(spec, utility, z, paths)
    print(f"z={z:.2f}  y*={res.y_star:.6f} (expect {2 * (1 - z):.6f})  "
          f"u(z)={res.primal_bound:.6f} (expect {1 - (1 - z) ** 2:.6f})  "
          f"wealth in [{np.min(res.wealth):.3f}, {np.max(res.wealth):.3f}]")
