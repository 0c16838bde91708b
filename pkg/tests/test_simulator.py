"""Closed-loop simulation over the channel."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mjls_fsmc import errors
from mjls_fsmc.fsmc import FsmcModel, burst_stats
from mjls_fsmc.lqr import PlantSpec, finite_horizon_cost, finite_horizon_lqr
from mjls_fsmc.simulator import (
    SimConfig,
    batch_longest_burst,
    burst_propagation,
    channel_seed,
    empirical_average_cost,
    export_stats,
    export_trace_csv,
    longest_bursts,
    monte_carlo,
    noise_factor,
    noise_seed,
    simulate_trace,
    _draw_noise,
)

from oracles import classical_lqr_gain

PERFECT = FsmcModel([[1.0]], [1.0])
PUBLISHED_AVERAGE_COST = 0.110421117


def small_plant(sigma=1e-2, phi=(0.5,), seed=0):
    rng = np.random.default_rng(seed)
    A = np.array([[1.05, 0.2], [0.0, 0.95]])
    B = np.array([[0.0], [1.0]])
    return PlantSpec(A, B, sigma * np.eye(2), np.eye(2), [[1.0]], phi, x0=rng.normal(size=2))


def lossy_channel():
    return FsmcModel([[0.8, 0.2], [0.3, 0.7]], [0.9, 0.4])


def stable_gain(plant):
    K, _ = classical_lqr_gain(plant.A, plant.B, plant.Q, plant.R)
    return K


# -- single traces -----------------------------------------------------------------


def test_zero_noise_zero_state_stays_at_rest():
    plant = small_plant(sigma=0.0)
    cfg = SimConfig(plant, lossy_channel(), stable_gain(plant), 200, x0=np.zeros(2))
    tr = simulate_trace(cfg)
    assert np.all(tr.x == 0) and np.all(tr.u == 0) and np.all(tr.u_c == 0)
    assert tr.total_cost == 0 and tr.cost == 0


def test_lossless_trace_is_deterministic_closed_loop():
    plant = small_plant(sigma=0.0)
    K = stable_gain(plant)
    tr = simulate_trace(SimConfig(plant, PERFECT, K, 100))
    x = plant.x0.copy()
    for k in range(100):
        assert np.abs(tr.x[k] - x).max() <= 1e-12 * max(1.0, np.abs(x).max())
        x = (plant.A + plant.B @ K) @ x
    assert np.all(tr.delta == 1) and np.array_equal(tr.u, tr.u_c)


def test_burst_counter_recursion(pendulum, pend_stationary):
    cfg = SimConfig(pendulum.plant, pendulum.channel, pend_stationary.K, 2000, master_seed=3)
    tr = simulate_trace(cfg)
    assert tr.Delta[0] == 0
    for k in range(1, tr.k.size):
        assert tr.Delta[k] == (1 - tr.delta[k - 1]) * (tr.Delta[k - 1] + 1)
    assert tr.Delta.max() >= 1


def test_dropout_steps_apply_compensation(pendulum, pend_stationary):
    cfg = SimConfig(pendulum.plant, pendulum.channel, pend_stationary.K, 2000, master_seed=4)
    tr = simulate_trace(cfg)
    phi = pendulum.plant.phi
    u_prev = np.zeros_like(tr.u[0])
    drops = 0
    for k in range(tr.k.size):
        if tr.delta[k]:
            assert np.array_equal(tr.u[k], tr.u_c[k])
        else:
            assert np.array_equal(tr.u[k], u_prev * phi)
            drops += 1
        u_prev = tr.u[k]
    assert drops > 0


def test_controller_uses_previous_channel_state(pendulum, pend_stationary):
    K = pend_stationary.K
    tr = simulate_trace(SimConfig(pendulum.plant, pendulum.channel, K, 300, master_seed=5))
    for k in range(tr.k.size):
        tp = tr.theta[k - 1] if k else tr.theta[0]
        ref = K[tp] @ tr.x[k]
        assert np.abs(tr.u_c[k] - ref).max() <= 1e-13 * max(1.0, np.abs(K[tp]).max() * np.abs(tr.x[k]).sum())


def test_cost_uses_applied_input(pendulum, pend_stationary):
    p = pendulum.plant
    tr = simulate_trace(SimConfig(p, pendulum.channel, pend_stationary.K, 300, master_seed=6))
    stage = np.einsum("ka,ab,kb->k", tr.x[:-1], p.Q, tr.x[:-1]) + np.einsum("ka,ab,kb->k", tr.u, p.R, tr.u)
    np.testing.assert_allclose(tr.step_cost, stage, rtol=1e-13)
    assert tr.total_cost == pytest.approx(stage.sum() + tr.x[-1] @ p.Q @ tr.x[-1], rel=1e-12)


def test_burst_closed_form_matches_stepwise_simulation():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n_x, n_u = rng.integers(1, 5), rng.integers(1, 3)
        plant = PlantSpec(rng.normal(size=(n_x, n_x)), rng.normal(size=(n_x, n_u)), np.eye(n_x),
                          np.eye(n_x), np.eye(n_u), rng.uniform(0, 1, n_u))
        h = int(rng.integers(0, 15))
        x, u = rng.normal(size=n_x), rng.normal(size=n_u)
        w = rng.normal(size=(h + 1, n_x))
        expected = burst_propagation(plant, x, u, w)
        for j in range(h + 1):
            x = plant.A @ x + plant.B @ u + w[j]
            u = plant.phi * u
        assert np.abs(expected - x).max() <= 1e-10 * max(1.0, np.abs(x).max())


def test_burst_closed_form_on_simulated_trace(pendulum, pend_stationary):
    p = pendulum.plant
    cfg = SimConfig(p, pendulum.channel, pend_stationary.K, 3000, master_seed=8)
    ns = noise_seed(8, 0)
    tr = simulate_trace(cfg, ns, channel_seed(8, 0))
    w = _draw_noise(p, 3000, [ns])[0]
    checked = 0
    for tau in range(tr.k.size - 1):
        if not tr.delta[tau]:
            continue
        h = 0
        while tau + 1 + h < tr.k.size and not tr.delta[tau + 1 + h]:
            got = burst_propagation(p, tr.x[tau], tr.u[tau], w[tau:tau + h + 2])
            ref = tr.x[tau + 2 + h]
            assert np.abs(got - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
            h += 1
            checked += 1
    assert checked > 100


def test_divergent_trace_is_truncated_and_flagged():
    plant = small_plant()
    cfg = SimConfig(plant, lossy_channel(), np.zeros((1, 2)), 5000, divergence_threshold=1e6)
    tr = simulate_trace(cfg)
    assert tr.divergent and tr.truncated_at is not None
    assert tr.k.size == tr.truncated_at < 5000
    stats = monte_carlo(SimConfig(plant, lossy_channel(), np.zeros((1, 2)), 400, 2, 3, divergence_threshold=1e6))
    assert stats.divergent_count == 6
    assert np.all(np.isinf(stats.costs))


def test_overflow_without_threshold_is_flagged():
    plant = PlantSpec([[1e80]], [[1.0]], [[1.0]], [[1.0]], [[1.0]], [0.0], x0=[1.0])
    stats = monte_carlo(SimConfig(plant, PERFECT, [[0.0]], 10, 1, 2))
    assert stats.divergent_count == 2


def test_config_validation(pendulum, pend_stationary):
    p, ch = pendulum.plant, pendulum.channel
    with pytest.raises(errors.ValidationError):
        SimConfig(p, ch, pend_stationary.K, 0)
    with pytest.raises(errors.ValidationError):
        SimConfig(p, ch, pend_stationary.K, 10, noise_traces=0)
    with pytest.raises(errors.ValidationError):
        SimConfig(p, ch, pend_stationary.K, 10, initial_theta_distribution=[0.5, 0.5, 0.5, 0.5])
    with pytest.raises(errors.ValidationError):
        SimConfig(p, ch, np.zeros((3, 1, 4)), 10)
    with pytest.raises(errors.ValidationError):
        SimConfig(p, ch, np.zeros((5, 4, 1, 4)), 10)


def test_time_varying_schedule(pendulum, pend_stats):
    sched = finite_horizon_lqr(pendulum.plant, pend_stats, 50)
    tr = simulate_trace(SimConfig(pendulum.plant, pendulum.channel, sched, 50, master_seed=2))
    for k in (0, 25, 49):
        tp = tr.theta[k - 1] if k else tr.theta[0]
        ref = sched.K[k, tp] @ tr.x[k]
        assert np.abs(tr.u_c[k] - ref).max() <= 1e-13 * max(1.0, np.abs(sched.K[k, tp]).max() * np.abs(tr.x[k]).sum())


# -- noise ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 4))
def test_noise_factor_reproduces_covariance(seed, n, rank):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n, min(rank, n)))
    S = G @ G.T
    F = noise_factor(S)
    assert np.abs(F @ F.T - S).max() <= 1e-12 * max(1.0, np.abs(S).max())


def test_plant_rejects_indefinite_noise():
    with pytest.raises(errors.ValidationError):
        PlantSpec(np.eye(2), [[0.0], [1.0]], np.diag([1.0, -1.0]), np.eye(2), [[1.0]], [0.0])


def test_noise_sample_covariance():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    plant = PlantSpec(np.eye(2), [[0.0], [1.0]], S, np.eye(2), [[1.0]], [0.0])
    w = _draw_noise(plant, 100_000, [noise_seed(0, 0)])[0]
    emp = w.T @ w / w.shape[0]
    # entrywise standard error of a sample covariance is sqrt((S_aa S_bb + S_ab^2) / n)
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / w.shape[0])
    assert np.all(np.abs(emp - S) <= 4 * se)


# -- Monte Carlo aggregation ---------------------------------------------------------------


def test_seed_and_worker_determinism():
    plant = small_plant()
    cfg = SimConfig(plant, lossy_channel(), stable_gain(plant), 300, 6, 40, master_seed=99)
    a = monte_carlo(cfg, workers=1)
    b = monte_carlo(cfg, workers=3)
    c = monte_carlo(cfg, workers=1)
    for s in (b, c):
        assert np.array_equal(a.costs, s.costs)
        assert np.array_equal(a.envelopes, s.envelopes)
        assert np.array_equal(a.longest_burst, s.longest_burst)
        assert np.array_equal(a.max_abs_state, s.max_abs_state)
    other = monte_carlo(SimConfig(plant, lossy_channel(), stable_gain(plant), 300, 6, 40, master_seed=100))
    assert not np.array_equal(a.costs, other.costs)


def test_single_trace_reproduces_grid_entry():
    plant = small_plant()
    cfg = SimConfig(plant, lossy_channel(), stable_gain(plant), 200, 3, 4, master_seed=21)
    stats = monte_carlo(cfg)
    for a, c in [(0, 0), (2, 3), (1, 2)]:
        tr = simulate_trace(cfg, noise_seed(21, a), channel_seed(21, c))
        assert tr.total_cost == pytest.approx(stats.total_costs[a * 4 + c], rel=1e-12)
        assert tr.longest_burst == stats.longest_burst[a * 4 + c]


def test_lossless_noiseless_envelopes_equal_single_trace():
    plant = small_plant(sigma=0.0)
    cfg = SimConfig(plant, PERFECT, stable_gain(plant), 60, 3, 4)
    stats = monte_carlo(cfg)
    tr = simulate_trace(cfg)
    for level in range(stats.envelopes.shape[0]):
        np.testing.assert_allclose(stats.envelopes[level], np.abs(tr.x), rtol=1e-12, atol=0)


def test_lossless_noiseless_cost_matches_optimal_cost():
    plant = small_plant(sigma=0.0)
    stats_ch = burst_stats(PERFECT)
    sched = finite_horizon_lqr(plant, stats_ch, 80)
    mc = monte_carlo(SimConfig(plant, PERFECT, sched, 80, 2, 2))
    J = finite_horizon_cost(sched, plant, theta_init=[1.0])
    np.testing.assert_allclose(mc.total_costs, J, rtol=1e-10)


def test_empirical_average_cost_exclusion():
    plant = small_plant()
    stats = monte_carlo(SimConfig(plant, lossy_channel(), stable_gain(plant), 100, 4, 5))
    costs = np.sort(stats.costs)
    assert empirical_average_cost(stats) == pytest.approx(costs.mean())
    assert empirical_average_cost(stats, 0.5) == pytest.approx(costs[:10].mean())
    with pytest.raises(errors.ValidationError):
        empirical_average_cost(stats, 0.0)


def test_reception_moment_accumulates_only_deliveries():
    plant = small_plant()
    cfg = SimConfig(plant, lossy_channel(), stable_gain(plant), 50, 1, 1, master_seed=5)
    stats = monte_carlo(cfg, moment_burn_in=10, envelopes=False)
    tr = simulate_trace(cfg)
    hits = [k for k in range(10, 50) if tr.delta[k]]
    ref = sum(np.outer(tr.x[k], tr.x[k]) for k in hits)
    assert stats.moment_counts[0] == len(hits)
    np.testing.assert_allclose(stats.moment_sums[0], ref, rtol=1e-12)


def test_longest_burst_helper():
    delta = np.array([[1, 0, 0, 1, 0, 0, 0, 1], [1, 1, 1, 1, 1, 1, 1, 1], [0, 0, 1, 0, 1, 1, 1, 0]])
    assert longest_bursts(delta).tolist() == [3, 0, 2]


# -- published pendulum claims -------------------------------------------------------------


@pytest.fixture(scope="module")
def pendulum_run(pendulum, pend_stationary):
    cfg = SimConfig(pendulum.plant, pendulum.channel, pend_stationary.K, 720, 50, 200, 7, x0=np.zeros(4))
    return monte_carlo(cfg)


def test_angle_stays_small_without_long_bursts(pendulum_run):
    keep = pendulum_run.longest_burst < 16
    frac = (pendulum_run.max_abs_state[keep, 1] < 0.05).mean()
    assert frac >= 0.99


def test_most_common_longest_burst(pendulum):
    longest = batch_longest_burst(pendulum.channel, 720, 2000, 50, seed=1)
    values, counts = np.unique(longest, return_counts=True)
    assert values[np.argmax(counts)] in (9, 10)
    assert np.isin(longest, [9, 10]).mean() >= 0.5


def test_average_cost_within_factor_three_of_published(pendulum_run):
    avg = empirical_average_cost(pendulum_run)
    assert PUBLISHED_AVERAGE_COST / 3 <= avg <= 3 * PUBLISHED_AVERAGE_COST


def test_compensation_free_cost_ordering(pendulum, pend_stationary_phi0, imported_gains):
    p = pendulum.plant.with_phi(0.0)
    avg = {}
    for name, K in (("P", pend_stationary_phi0.K), ("M", imported_gains["K_M"]), ("B", imported_gains["K_B"])):
        avg[name] = empirical_average_cost(monte_carlo(SimConfig(p, pendulum.channel, K, 720, 50, 200, 7,
                                                                        x0=np.zeros(4))))
    assert avg["P"] < avg["B"] < avg["M"]


# -- export -----------------------------------------------------------------------------------


def test_trace_csv_columns(tmp_path, pendulum, pend_stationary):
    tr = simulate_trace(SimConfig(pendulum.plant, pendulum.channel, pend_stationary.K, 30))
    path = tmp_path / "trace.csv"
    export_trace_csv(tr, path, trace_id=4)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["trace_id", "k", "theta", "delta", "Delta", "x_1", "x_2", "x_3", "x_4", "u", "u_c",
                       "step_cost"]
    assert len(rows) == 31
    assert rows[5][0] == "4" and int(rows[5][1]) == 4
    assert float(rows[5][5]) == tr.x[4, 0] and float(rows[5][-1]) == tr.step_cost[4]
    assert int(rows[5][2]) == tr.theta[4] + 1


def test_stats_export(tmp_path):
    plant = small_plant()
    stats = monte_carlo(SimConfig(plant, lossy_channel(), stable_gain(plant), 20, 2, 3))
    paths = export_stats(stats, tmp_path, exclusion_quantile=0.9)
    assert [p.name for p in paths] == ["envelopes.csv", "trace_costs.csv", "summary.json"]
    env = list(csv.reader(open(paths[0])))
    assert len(env) == 22 and env[0][1] == "x_1_p50"
    costs = list(csv.reader(open(paths[1])))
    assert len(costs) == 7 and float(costs[4][3]) == stats.costs[3]
