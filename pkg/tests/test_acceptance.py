"""Acceptance criteria 1-12.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion.  Run on its own with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import sys

import numpy as np
import pytest

from mjls_fsmc import cli
from mjls_fsmc.config import bundled_gains_path
from mjls_fsmc.fsmc import FsmcModel, burst_stats, burst_steady_state, stationary_distribution
from mjls_fsmc.lqr import (
    PlantSpec,
    bernoulli_baseline,
    finite_horizon_cost,
    finite_horizon_lqr,
    infinite_horizon_lqr,
    long_run_cost,
    sweep_phi,
)
from mjls_fsmc.simulator import SimConfig, burst_propagation, monte_carlo
from mjls_fsmc.stability import (
    analyze_stability,
    closed_loop_matrices,
    lambda_operator,
    mode_index,
    mode_steady_state,
    mu_transitions,
    spectral_radius,
    StabilityReport,
)

from instances import spectral_instances
from oracles import (
    classical_finite_lqr,
    classical_lqr_gain,
    conditional_moment_monte_carlo,
    dense_lambda_loops,
    mu_enumerated,
    two_way_bootstrap_means,
    two_way_bootstrap_std,
    zeta_enumerated,
)

criterion = pytest.mark.criterion

K_FINITE = [[0.001538, -2.471896, 0.148793, -0.268961], [0.001567, -2.472563, 0.148842, -0.269040],
            [0.001572, -2.472673, 0.148850, -0.269053], [0.001628, -2.473934, 0.148943, -0.269201]]
K_B = [0.048425, -4.419243, 0.283052, -0.495964]
K_P = [[0.011000, -4.528464, 0.275168, -0.494649], [0.011208, -4.528800, 0.275254, -0.494734],
       [0.011242, -4.528856, 0.275268, -0.494748], [0.011634, -4.529491, 0.275429, -0.494908]]
RHO_SWEEP = {0.0: 0.983706, 0.921: 0.979943, 1.0: 0.992784}
COST_SWEEP = {0.0: 0.000505, 0.1: 0.000511, 0.3: 0.000562, 0.5: 0.000710, 0.7: 0.001195, 0.9: 0.005389,
              1.0: 0.519529}
ARRIVAL_PROBABILITY = 0.908862


def small_channels():
    rng = np.random.default_rng(77)
    out = []
    for N in (1, 2, 3, 2, 3):
        P = rng.dirichlet(np.ones(N), size=N)
        out.append(FsmcModel(P, rng.uniform(0.2, 0.95, N)))
    return out


# -- 1-3: finite and infinite horizon synthesis ------------------------------------------


@criterion(1, "finite-horizon gains at T = 720 match the published rows")
def test_finite_horizon_gains(pend_schedule):
    assert np.abs(pend_schedule.K[0, :, 0, :] - np.array(K_FINITE)).max() <= 1e-5


@criterion(2, "finite-horizon optimal costs from x0 and from the origin")
def test_finite_horizon_costs(pendulum, pend_schedule):
    p = pendulum.plant
    theta = np.full(4, 0.25)
    assert finite_horizon_cost(pend_schedule, p, theta, p.x0) == pytest.approx(1988.980076, rel=1e-3)
    assert finite_horizon_cost(pend_schedule, p, theta, np.zeros(4)) == pytest.approx(3.416528, rel=1e-3)


@criterion(3, "stationary gains equal the finite-horizon initial gains; long-run cost")
def test_infinite_horizon(pendulum, pend_stats, pend_schedule, pend_stationary):
    assert np.abs(pend_stationary.K - pend_schedule.K[0]).max() <= 1e-5
    J = long_run_cost(pendulum.plant, pend_stats, pend_stationary.X)
    assert J == pytest.approx(0.007692, rel=1e-4)


# -- 4-6: sweep, controller comparison, arrival probability --------------------------------


@pytest.fixture(scope="module")
def sweep_rows(pendulum, pend_stats):
    grid = sorted(set(RHO_SWEEP) | set(COST_SWEEP))
    return {r.phi: r for r in sweep_phi(pendulum.plant, pend_stats, grid, workers=4)}


@criterion(4, "compensation sweep: spectral radius, long-run cost, monotone cost")
def test_sweep_spectral_radius(sweep_rows):
    for phi, rho in RHO_SWEEP.items():
        assert abs(sweep_rows[phi].rho - rho) <= 1e-5


@criterion(4, "compensation sweep: spectral radius, long-run cost, monotone cost")
def test_sweep_costs(sweep_rows):
    for phi, J in COST_SWEEP.items():
        assert sweep_rows[phi].J_inf == pytest.approx(J, rel=1e-4)


@criterion(4, "compensation sweep: spectral radius, long-run cost, monotone cost")
def test_sweep_cost_monotone(sweep_rows):
    costs = [sweep_rows[phi].J_inf for phi in sorted(sweep_rows)]
    assert all(a < b for a, b in zip(costs, costs[1:]))


@criterion(5, "controller comparison: imported and synthesized gains")
def test_comparison_spectral_radii(pendulum, pend_stats, imported_gains, pend_stationary_phi0):
    p0 = pendulum.plant.with_phi(0.0)
    assert abs(spectral_radius(p0, pend_stats, imported_gains["K_B"]) - 1.042846) <= 1e-5
    assert abs(spectral_radius(p0, pend_stats, imported_gains["K_M"]) - 0.999749) <= 1e-5
    assert abs(pend_stationary_phi0.rho - 0.983706) <= 1e-5


@criterion(5, "controller comparison: imported and synthesized gains")
def test_comparison_bernoulli_baseline_gain(pendulum):
    sol = bernoulli_baseline(pendulum.plant.with_phi(0.0), ARRIVAL_PROBABILITY)
    assert np.abs(sol.K[0, 0] - np.array(K_B)).max() <= 1e-4


@criterion(5, "controller comparison: imported and synthesized gains")
def test_comparison_compensation_free_gains(pend_stationary_phi0):
    assert np.abs(pend_stationary_phi0.K[:, 0, :] - np.array(K_P)).max() <= 1e-5


@criterion(6, "stationary arrival probability of the bundled channel")
def test_arrival_probability(pendulum):
    ch = pendulum.channel
    assert abs(stationary_distribution(ch) @ ch.delta_hat - ARRIVAL_PROBABILITY) <= 1e-6


# -- 7-8: statistical consistency ------------------------------------------------------------


@criterion(7, "empirical reception moment within 3 sigma of the steady-state moment")
def test_moment_consistency(pendulum):
    """Pendulum plant on a channel whose burst tail decays faster than the
    open-loop growth, so the reception moment is finite."""
    p = pendulum.plant
    channel = FsmcModel(pendulum.channel.P_c, [0.8, 0.85, 0.9, 0.995])
    stats = burst_stats(channel)
    sol = infinite_horizon_lqr(p, stats)
    rep = analyze_stability(p, stats, sol.K)
    assert rep.stable
    mc = monte_carlo(SimConfig(p, channel, sol.K, 720, 50, 200, 11, x0=np.zeros(4)), moment_burn_in=200,
                     envelopes=False)
    assert mc.moment_counts.sum() >= 100_000
    sigma = two_way_bootstrap_std(mc.moment_sums, mc.moment_counts, 50, 200, 300, seed=0)
    assert np.all(np.abs(mc.reception_moment() - rep.X_e) <= 3 * sigma)


@criterion(8, "spectral verdict agrees with Monte Carlo moment growth on random instances")
def test_spectral_verdict_sampling():
    agree, verdicts = 0, []
    for idx, (plant, ch, K, rho) in enumerate(spectral_instances(50)):
        m = conditional_moment_monte_carlo(plant.A, plant.B, plant.Phi, plant.Sigma_w, K, ch.P_c, ch.delta_hat,
                                           horizon=10_000, n_traces=1000, seed=idx)
        growth = m["late"] / m["early"] if np.isfinite(m["late"]) else np.inf
        bounded = growth <= 10
        verdicts.append((rho, growth))
        agree += bounded == (rho < 1)
    assert agree == 50, f"{agree}/50 agree; disagreements: " + ", ".join(
        f"rho={r:.4f} growth={g:.3g}" for r, g in verdicts if (g <= 10) != (r < 1))


# -- 9-10: oracle equivalences and normalization -----------------------------------------------


@criterion(9, "oracle equivalences")
def test_lossless_reduces_to_classical_lqr():
    rng = np.random.default_rng(9)
    perfect = burst_stats(FsmcModel([[1.0]], [1.0]))
    for _ in range(10):
        n_x, n_u = 3, 2
        S = rng.normal(size=(n_x, n_x))
        plant = PlantSpec(rng.normal(size=(n_x, n_x)), rng.normal(size=(n_x, n_u)), S @ S.T, np.eye(n_x),
                          np.eye(n_u), rng.uniform(0, 1, n_u))
        sched = finite_horizon_lqr(plant, perfect, 30)
        K_ref = classical_finite_lqr(plant.A, plant.B, plant.Q, plant.R, 30)
        assert np.abs(sched.K[:, 0] - K_ref).max() <= 1e-8 * max(1.0, np.abs(K_ref).max())
        K_inf, _ = classical_lqr_gain(plant.A, plant.B, plant.Q, plant.R)
        sol = infinite_horizon_lqr(plant, perfect, check_stability=False)
        assert np.abs(sol.K[0] - K_inf).max() <= 1e-8 * max(1.0, np.abs(K_inf).max())


@criterion(9, "oracle equivalences")
def test_burst_laws_match_enumeration():
    for ch in small_channels():
        N = ch.n_states
        stats = burst_stats(ch, L=2)
        for i in range(N):
            for n in range(3):
                for j in range(N):
                    assert abs(stats.zeta[i, n, j] - zeta_enumerated(ch.P_c, ch.delta_hat, i, n, j)) <= 1e-12
        ix = mode_index(N, 2)
        mu, _ = mu_transitions(stats, ix)
        modes = [(j1, n, j0) for n in range(3) for j0 in range(N) for j1 in range(N)]
        for s in modes:
            for t in modes:
                ref = mu_enumerated(ch.P_c, ch.delta_hat, s, t)
                assert abs(mu[ix.flat(*s), ix.flat(*t)] - ref) <= 1e-12


@criterion(9, "oracle equivalences")
def test_lambda_operator_matches_dense():
    rng = np.random.default_rng(99)
    for ch in small_channels()[:4]:
        N = ch.n_states
        stats = burst_stats(ch, L=2)
        ix = mode_index(N, 2)
        mu, unreachable = mu_transitions(stats, ix)
        plant = PlantSpec(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), np.eye(2), np.eye(2), np.eye(1),
                          [rng.uniform()])
        K = rng.normal(size=(N, 1, 2))
        rep = StabilityReport(ix, closed_loop_matrices(plant, K, ix), mu, unreachable)
        dense = dense_lambda_loops(rep.closed_loop, rep.mu)
        v = rng.normal(size=dense.shape[0])
        ref = dense @ v
        assert np.abs(lambda_operator(rep).matvec(v) - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


@criterion(9, "oracle equivalences")
def test_burst_closed_form_matches_stepwise():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n_x, n_u = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        plant = PlantSpec(rng.normal(size=(n_x, n_x)), rng.normal(size=(n_x, n_u)), np.eye(n_x), np.eye(n_x),
                          np.eye(n_u), rng.uniform(0, 1, n_u))
        h = int(rng.integers(0, 15))
        x, u = rng.normal(size=n_x), rng.normal(size=n_u)
        w = rng.normal(size=(h + 1, n_x))
        closed = burst_propagation(plant, x, u, w)
        for j in range(h + 1):
            x = plant.A @ x + plant.B @ u + w[j]
            u = plant.phi * u
        assert np.abs(closed - x).max() <= 1e-10 * max(1.0, np.abs(x).max())


@criterion(10, "probability objects satisfy their normalization constraints")
def test_normalization(pendulum, pend_stats):
    eps = pend_stats.epsilon
    for ch in [pendulum.channel] + small_channels():
        stats = pend_stats if ch is pendulum.channel else burst_stats(ch)
        P = ch.P_c
        assert np.abs(P.sum(axis=1) - 1).max() <= 1e-12 and P.min() >= 0
        assert np.abs(stats.P1 + stats.P0 - P).max() <= 1e-12
        mass = stats.zeta.sum(axis=(1, 2))
        assert np.all(mass >= 1 - 10 * eps) and np.all(mass <= 1 + 10 * eps * stats.L)
        theta = stationary_distribution(ch)
        assert abs(theta.sum() - 1) <= 1e-12 and np.abs(theta @ P - theta).max() <= 1e-12
        pi = burst_steady_state(stats)
        assert abs(pi.sum() - 1) <= 1e-10 and pi.min() >= 0
        mu, unreachable = mu_transitions(stats)
        rows = mu.sum(axis=1)[~unreachable]
        assert np.all(rows >= 1 - 10 * eps) and np.all(rows <= 1 + 10 * eps * stats.L)
        psi = mode_steady_state(mu, unreachable)
        assert abs(psi.sum() - 1) <= 1e-10 and psi.min() >= 0


# -- 11-12: determinism and controller ordering -------------------------------------------------


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@criterion(11, "seeded simulate and sweep runs are byte-identical across worker counts")
def test_determinism(tmp_path, monkeypatch):
    outputs = {}
    for threads in ("1", "2", "4", "4"):
        monkeypatch.setenv("MJLS_THREADS", threads)
        tag = f"{threads}-{len(outputs)}"
        assert cli.main(["simulate", "--traces", "8x80", "--seed", "123", "--horizon", "150",
                         "--exclude-quantile", "0.95", "--out", str(tmp_path / "sim" / tag)]) == 0
        assert cli.main(["sweep-phi", "--grid", "0,0.5,0.921", "--out", str(tmp_path / "sweep" / tag)]) == 0
        outputs[tag] = (_files(tmp_path / "sim" / tag), _files(tmp_path / "sweep" / tag))
    first = next(iter(outputs.values()))
    assert all(out == first for out in outputs.values())


@criterion(12, "all-samples cost ordering proposed < Bernoulli < Markov at 95% bootstrap confidence")
def test_cost_ordering(pendulum, pend_stationary_phi0, imported_gains):
    p = pendulum.plant.with_phi(0.0)
    costs = []
    for K in (pend_stationary_phi0.K, imported_gains["K_B"], imported_gains["K_M"]):
        stats = monte_carlo(SimConfig(p, pendulum.channel, K, 720, 50, 200, 7, x0=np.zeros(4)))
        assert stats.divergent_count == 0
        costs.append(stats.costs)
    boots = two_way_bootstrap_means(np.array(costs), 50, 200, 1000, seed=3)
    confidence = np.mean((boots[:, 0] < boots[:, 1]) & (boots[:, 1] < boots[:, 2]))
    means = np.mean(costs, axis=1)
    assert confidence >= 0.95, f"P, B, M means {means}; ordering holds in {confidence:.1%} of replicates"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
