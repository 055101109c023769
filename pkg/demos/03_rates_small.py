# A reduced convergence sweep on the stochastic-factor market. Small M keeps it under a minute;
# the acceptance suite runs the full-size version.
from qrbsde.convergence import SweepConfig, run_sweep
from qrbsde.presets import sf_example

for reg in ("lipschitz", "c2b"):
    problem = sf_example(reg)
    cfg = SweepConfig(ns=(2, 4, 8, 16, 32, 64), substeps=4096, M=1000, seed=1)
    rep = run_sweep(problem, cfg)
    print(problem.name)
    for r in rep.rows:
        print(f"  n={r.n:3d}  errY {r.err_y_pathsup_sq:.3e}  errZ {r.err_z_l2_sq:.3e}  errK {r.err_k_sup:.3e}")
    print("  slopes", {k: round(v, 3) for k, v in rep.slopes.items()}, " theory", rep.theory)
