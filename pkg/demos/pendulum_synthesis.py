"""Gain synthesis and stability check for the bundled inverted pendulum.

Run: python demos/pendulum_synthesis.py
"""

import numpy as np

from mjls_fsmc import analyze_stability, burst_stats, finite_horizon_lqr, infinite_horizon_lqr, load_pendulum
from mjls_fsmc.lqr import finite_horizon_cost, long_run_cost

np.set_printoptions(precision=6, suppress=True)

cfg = load_pendulum()
plant, channel = cfg.plant, cfg.channel
stats = burst_stats(channel)
print(f"maximal burst length L = {stats.L}")

schedule = finite_horizon_lqr(plant, stats, cfg.run.horizon)
print("finite-horizon gains at k = 0, one row per channel state:")
print(schedule.K[0, :, 0, :])
print(f"J_T(x0) = {finite_horizon_cost(schedule, plant, cfg.theta_init, plant.x0):.6f}")
print(f"J_T(0)  = {finite_horizon_cost(schedule, plant, cfg.theta_init, np.zeros(4)):.6f}")

stationary = infinite_horizon_lqr(plant, stats)
print(f"stationary gains differ from k = 0 gains by {np.abs(stationary.K - schedule.K[0]).max():.2e}")
print(f"J_inf = {long_run_cost(plant, stats, stationary.X):.6f}")

report = analyze_stability(plant, stats, stationary.K)
print(f"rho(Lambda) = {report.rho:.6f} over {report.index.size} augmented modes")
print("steady-state second moment at delivery instants, diagonal:", np.diag(report.X_e))
