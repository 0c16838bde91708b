"""Monte Carlo comparison of three controllers without input hold.

The proposed burst-aware gains are synthesized here; the Bernoulli and
Markov gains are the bundled imported fixtures.

Run: python demos/controller_comparison.py
"""

import numpy as np

from mjls_fsmc import burst_stats, infinite_horizon_lqr, load_pendulum, spectral_radius
from mjls_fsmc.config import bundled_gains_path
from mjls_fsmc.lqr import load_gains
from mjls_fsmc.simulator import SimConfig, empirical_average_cost, monte_carlo

cfg = load_pendulum()
plant = cfg.plant.with_phi(0.0)
stats = burst_stats(cfg.channel)
gains = {
    "proposed": infinite_horizon_lqr(plant, stats).K,
    "bernoulli": load_gains(bundled_gains_path("K_B"), 4),
    "markov": load_gains(bundled_gains_path("K_M"), 4),
}
print(f"{'controller':>10} {'rho':>9} {'cost 99.95%':>12} {'cost all':>12} {'max |angle|':>12}")
for name, K in gains.items():
    run = monte_carlo(SimConfig(plant, cfg.channel, K, 720, 50, 200, 7, x0=np.zeros(4)))
    rho = spectral_radius(plant, stats, K)
    print(f"{name:>10} {rho:9.6f} {empirical_average_cost(run, 0.9995):12.4g} "
          f"{empirical_average_cost(run):12.4g} {run.max_abs_state[:, 1].max():12.4g}")
