# How much value is lost when exercise is only allowed at n dates.
import numpy as np

from qrbsde.model import Partition
from qrbsde.pde import SpaceGrid
from qrbsde.presets import american_oracle
from qrbsde.reflected import solve_continuous_reference, solve_discrete

p = american_oracle()
grid = SpaceGrid.default(p.model, p.T)
x0 = p.model.x0

ref = solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, 4096)
y_am = np.interp(x0, grid.x, ref.u[0])
print("American value at x0 =", x0, ":", y_am)

for n in (1, 2, 4, 8, 16, 32, 64):
    d = solve_discrete(Partition.uniform(p.T, n), p.model, p.driver, p.obstacle, grid, 4096)
    y = np.interp(x0, grid.x, d.post[0])
    # the gap shrinks like the mesh for this payoff away from the kink
    print(f"n={n:3d}  Bermudan {y:.6f}  gap {y_am - y:.2e}  max L_i {d.lipschitz.max():.3f}")
