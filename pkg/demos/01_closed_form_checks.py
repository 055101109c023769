# Three problems where the answer is known in closed form or by an independent method.
import math

import numpy as np

from qrbsde.forward import gauss_hermite_expectation
from qrbsde.oracles import binomial_american
from qrbsde.pde import SpaceGrid, solve_interval
from qrbsde.presets import american_oracle, colehopf_oracle, heat_oracle
from qrbsde.reflected import solve_continuous_reference

# Heat equation: f = 0, terminal cos(x), so Y_0 = exp(-T/2) cos(x0).
p = heat_oracle()
grid = SpaceGrid.default(p.model, p.T)
surf = solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, 4096)
print("heat       Y0 =", np.interp(0.0, grid.x, surf.u[0]), " exact", math.exp(-0.5))

# Pure quadratic driver: the exponential transform linearizes it.
p = colehopf_oracle()
surf = solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, 4096)
exact = -math.log(gauss_hermite_expectation(lambda y: np.exp(-np.cos(y)), 0.0, 1.0))
print("colehopf   Y0 =", np.interp(0.0, grid.x, surf.u[0]), " quadrature", exact)

# American tent payoff on Brownian motion, against a 2000-step tree.
p = american_oracle()
grid = SpaceGrid.default(p.model, p.T)
ref = solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, 4096)
for x0 in (0.5, 0.8, 1.0, 1.3):
    print(f"american   x0={x0}: pde {np.interp(x0, grid.x, ref.u[0]):.6f}"
          f"  tree {binomial_american(p.obstacle, x0, p.T, 1.0):.6f}")
