"""Spectral radius and long-run cost as the compensation factor varies.

Run: python demos/compensation_sweep.py
"""

from mjls_fsmc import burst_stats, load_pendulum, sweep_phi

cfg = load_pendulum()
stats = burst_stats(cfg.channel)
grid = [round(0.05 * i, 2) for i in range(21)] + [0.921]
print(f"{'phi':>6} {'rho':>10} {'J_inf':>12}")
for row in sorted(sweep_phi(cfg.plant, stats, grid, workers=4), key=lambda r: r.phi):
    if row.error:
        print(f"{row.phi:6.3f}  {row.error}")
    else:
        print(f"{row.phi:6.3f} {row.rho:10.6f} {row.J_inf:12.6g}")
