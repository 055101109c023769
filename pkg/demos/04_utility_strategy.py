# Indifference value and the optimal stock position along a few simulated paths.
import numpy as np

from qrbsde.forward import simulate
from qrbsde.model import Partition
from qrbsde.pde import SpaceGrid
from qrbsde.presets import problem_from_dict
from qrbsde.reflected import evaluate_along_paths, solve_continuous_reference, solve_discrete
from qrbsde.valuation import exercise_region, strategy_path, value_function

# start away from the bump so that stopping is not immediate
p = problem_from_dict({"preset": "sf-example", "obstacle": {"kind": "c2b"}, "forward": {"x0": 1.5}})
grid = SpaceGrid.default(p.model, p.T)
ref = solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, 2048)
disc = solve_discrete(Partition.uniform(p.T, 8), p.model, p.driver, p.obstacle, grid, 2048)

y0 = np.interp(p.model.x0, grid.x, ref.u[0])
print("Y0 =", y0, " g(x0) =", float(p.obstacle(p.model.x0)), " V(0, x=0) =", value_function(p.driver.alpha, 0.0, y0))

region = exercise_region(ref, p.obstacle)
batch = simulate(p.model, ref.times, 5, seed=3)
proc = evaluate_along_paths(disc, ref, batch, p.model)
stop = region.hitting_index(batch.states)
strat = strategy_path(p.market, proc, p.model.sigma_vec, stop)

for i in range(batch.M):
    k = stop[i]
    print(f"path {i}: stops at t={ref.times[k]:.4f}, pi at t=0 {strat.pi[i, 0]:+.4f}, "
          f"pi just before stopping {strat.pi[i, max(k - 1, 0)]:+.4f}")
