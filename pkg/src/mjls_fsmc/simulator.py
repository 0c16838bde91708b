"""Seeded Monte Carlo simulation of the closed loop over an FSMC link.

Every combination of a process-noise trace and a channel trace is one
simulated trace.  Noise trace ``a`` and channel trace ``c`` draw from
independent streams keyed by ``(master_seed, 0, a)`` and
``(master_seed, 1, c)``, so results do not depend on evaluation order or
on how traces are split across workers.

Per step ``k``:

* the controller uses ``K_(theta_{k-1})`` (``theta_{-1} = theta_0``),
* ``u_k = delta_k u_k^c + (1 - delta_k) Phi u_{k-1}`` with ``u_{-1} = 0``,
* ``x_{k+1} = A x_k + B u_k + w_k``.

Costs weight ``x_k`` and the *applied* ``u_k``.  The trace cost adds
``x_T' Q x_T`` and is normalised by the horizon.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fsmc import FsmcModel, sample_channel_traces
from .lqr import GainSchedule, PlantSpec, StationaryGains, psi

__all__ = [
    "ENVELOPE_LEVELS",
    "SimConfig",
    "SimTrace",
    "SimStats",
    "noise_seed",
    "channel_seed",
    "noise_factor",
    "simulate_trace",
    "monte_carlo",
    "empirical_average_cost",
    "longest_bursts",
    "batch_longest_burst",
    "burst_propagation",
    "worker_count",
    "export_trace_csv",
    "export_stats",
]

ENVELOPE_LEVELS = (0.5, 0.95, 0.999, 1.0)
_MIN_CHUNK = 4096


def noise_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(0, int(index)))


def channel_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(1, int(index)))


def noise_factor(Sigma: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of ``Sigma`` (zero-variance directions map to zero)."""
    vals, vecs = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    tol = max(vals.max(initial=0.0), 0.0) * Sigma.shape[0] * np.finfo(float).eps
    root = np.sqrt(np.where(vals > tol, vals, 0.0))
    return (vecs * root) @ vecs.T


def worker_count(requested: int | None = None) -> int:
    """Worker threads: ``requested``, else ``MJLS_THREADS``, else the CPU count."""
    if requested is None:
        env = os.environ.get("MJLS_THREADS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValidationError(f"MJLS_THREADS must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    return max(1, int(requested))


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Plant, channel, gains and Monte Carlo grid.

    ``gains`` is a stationary stack ``(N, n_u, n_x)``, a single gain
    ``(n_u, n_x)`` shared by every state, a time-varying stack
    ``(T, N, n_u, n_x)``, a :class:`GainSchedule` or :class:`StationaryGains`.
    ``x0`` overrides the plant's initial state.
    """

    plant: PlantSpec
    channel: FsmcModel
    gains: object
    horizon: int
    noise_traces: int = 50
    channel_traces: int = 200
    master_seed: int = 0
    initial_theta_distribution: np.ndarray | None = None
    x0: np.ndarray | None = None
    divergence_threshold: float = 1e100

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValidationError(f"horizon must be a positive integer, got {self.horizon}")
        if self.noise_traces < 1 or self.channel_traces < 1:
            raise ValidationError("trace counts must be >= 1")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("master_seed must be an unsigned 64-bit integer")
        N, n_u, n_x = self.channel.n_states, self.plant.n_u, self.plant.n_x
        g = self.gains
        if isinstance(g, (GainSchedule, StationaryGains)):
            g = g.K
        K = np.array(g, dtype=np.float64)
        if K.ndim == 2:
            K = np.broadcast_to(K, (N,) + K.shape).copy()
        if K.ndim == 3 and K.shape[0] == 1 and N > 1:
            K = np.broadcast_to(K, (N,) + K.shape[1:]).copy()
        if K.ndim == 3:
            expected = (N, n_u, n_x)
        elif K.ndim == 4:
            if K.shape[0] < self.horizon:
                raise ValidationError(f"time-varying gains cover {K.shape[0]} steps, horizon is {self.horizon}")
            expected = (K.shape[0], N, n_u, n_x)
        else:
            raise ValidationError(f"unsupported gain array shape {K.shape}")
        if K.shape != expected:
            raise ValidationError(f"gains must have shape {expected}, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValidationError("gains must be finite")
        K.setflags(write=False)
        object.__setattr__(self, "gains", K)
        init = (np.full(N, 1.0 / N) if self.initial_theta_distribution is None
                else np.array(self.initial_theta_distribution, dtype=np.float64))
        if init.shape != (N,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise ValidationError("initial_theta_distribution must be a probability vector over channel states")
        init.setflags(write=False)
        object.__setattr__(self, "initial_theta_distribution", init)
        x0 = self.plant.x0 if self.x0 is None else np.array(self.x0, dtype=np.float64).reshape(-1)
        if x0.shape != (n_x,):
            raise ValidationError(f"x0 must have length {n_x}")
        object.__setattr__(self, "x0", x0)

    @property
    def time_varying(self) -> bool:
        return self.gains.ndim == 4

    @property
    def n_traces(self) -> int:
        return self.noise_traces * self.channel_traces


@dataclass(eq=False)
class SimTrace:
    """Step records of one trace (``k = 0..T-1``; ``x`` also holds ``x_T``)."""

    k: np.ndarray
    theta: np.ndarray
    delta: np.ndarray
    Delta: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_c: np.ndarray
    step_cost: np.ndarray
    total_cost: float
    cost: float
    divergent: bool = False
    truncated_at: int | None = None

    @property
    def longest_burst(self) -> int:
        return int(longest_bursts(self.delta[np.newaxis])[0])


@dataclass(eq=False)
class SimStats:
    """Aggregated Monte Carlo results over the noise x channel grid.

    Trace ``t`` pairs noise trace ``t // channel_traces`` with channel trace
    ``t % channel_traces``.  ``envelopes[l, k, i]`` is the ``ENVELOPE_LEVELS[l]``
    quantile of ``|x_k[i]|`` over non-divergent traces.
    """

    noise_traces: int
    channel_traces: int
    horizon: int
    master_seed: int
    costs: np.ndarray
    total_costs: np.ndarray
    max_abs_state: np.ndarray
    longest_burst: np.ndarray
    channel_longest_burst: np.ndarray
    divergent: np.ndarray
    envelopes: np.ndarray
    levels: tuple = ENVELOPE_LEVELS
    moment_sums: np.ndarray | None = field(default=None, repr=False)
    moment_counts: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_traces(self) -> int:
        return self.costs.shape[0]

    @property
    def divergent_count(self) -> int:
        return int(self.divergent.sum())

    def burst_histogram(self) -> dict[int, int]:
        """Longest burst per channel trace, as ``{length: count}``."""
        values, counts = np.unique(self.channel_longest_burst, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def reception_moment(self) -> np.ndarray:
        """Pooled ``E[x x']`` over recorded reception instants."""
        if self.moment_sums is None:
            raise ValidationError("run monte_carlo with moment_burn_in to record reception moments")
        with _quiet():
            return self.moment_sums.sum(axis=0) / self.moment_counts.sum()


# -- fixed-order arithmetic so that per-trace results do not depend on chunking
# Divergent traces overflow before they are flagged, so overflow is silenced here.

def _quiet():
    return np.errstate(over="ignore", invalid="ignore")


def _quietly(fn):
    def wrapped(*args):
        with _quiet():
            return fn(*args)
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_quietly
def _mv(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Row-wise ``M @ x`` for ``X`` of shape ``(n, d)``; ``M`` is ``(m, d)`` or ``(n, m, d)``."""
    if M.ndim == 2:
        out = X[:, 0:1] * M[:, 0]
        for j in range(1, M.shape[1]):
            out = out + X[:, j:j + 1] * M[:, j]
    else:
        out = M[:, :, 0] * X[:, 0:1]
        for j in range(1, M.shape[2]):
            out = out + M[:, :, j] * X[:, j:j + 1]
    return out


@_quietly
def _dot(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    out = X[:, 0] * Y[:, 0]
    for j in range(1, X.shape[1]):
        out = out + X[:, j] * Y[:, j]
    return out


def _draw_noise(plant: PlantSpec, horizon: int, seeds) -> np.ndarray:
    F = noise_factor(plant.Sigma_w)
    out = np.empty((len(seeds), horizon, plant.n_x))
    for a, seed in enumerate(seeds):
        z = np.random.default_rng(seed).standard_normal((horizon, plant.n_x))
        out[a] = z @ F
    return out


def _draw_channel(config: SimConfig, seeds) -> tuple[np.ndarray, np.ndarray]:
    T = config.horizon
    u = np.empty((len(seeds), 2 * T))
    for c, seed in enumerate(seeds):
        u[c] = np.random.default_rng(seed).random(2 * T)
    return sample_channel_traces(config.channel, T, u, config.initial_theta_distribution)


def longest_bursts(delta: np.ndarray) -> np.ndarray:
    """Longest run of consecutive dropouts in each row of ``delta``."""
    delta = np.asarray(delta)
    run = np.zeros(delta.shape[0], dtype=np.int64)
    best = np.zeros(delta.shape[0], dtype=np.int64)
    for k in range(delta.shape[1]):
        run = (run + 1) * (1 - delta[:, k])
        np.maximum(best, run, out=best)
    return best


class _Lockstep:
    """State of a block of traces advanced one step at a time."""

    def __init__(self, config: SimConfig, n: int):
        p = config.plant
        self.config = config
        self.x = np.broadcast_to(config.x0, (n, p.n_x)).copy()
        self.u = np.zeros((n, p.n_u))
        self.Delta = np.zeros(n, dtype=np.int64)
        self.prev_delta = np.ones(n, dtype=np.int64)
        self.cost = np.zeros(n)
        self.max_abs = np.abs(self.x).copy()
        self.divergent = np.zeros(n, dtype=bool)
        self.phi = p.phi

    def step(self, k, theta_prev, delta, w, sl=slice(None), record=None):
        cfg, p = self.config, self.config.plant
        x, u_prev = self.x[sl], self.u[sl]
        K = cfg.gains[k] if cfg.time_varying else cfg.gains
        u_c = _mv(K[theta_prev], x)
        d = delta[:, np.newaxis].astype(bool)
        u = np.where(d, u_c, u_prev * self.phi)
        stage = _dot(_mv(p.Q, x), x) + _dot(_mv(p.R, u), u)
        Delta = (1 - self.prev_delta[sl]) * (self.Delta[sl] + 1)
        if record is not None:
            record["u_c"][k], record["u"][k] = u_c[0], u[0]
            record["step_cost"][k], record["Delta"][k] = stage[0], Delta[0]
        x_next = _mv(p.A, x) + _mv(p.B, u) + w
        bad = (~np.isfinite(x_next).all(axis=1) | ~np.isfinite(stage)
               | (np.abs(x_next).max(axis=1) > cfg.divergence_threshold))
        alive = ~self.divergent[sl]
        bad &= alive
        self.cost[sl] += np.where(alive, stage, 0.0)
        if bad.any():
            x_next[bad] = 0.0
            u[bad] = 0.0
            self.divergent[sl] |= bad
        self.x[sl], self.u[sl] = x_next, u
        self.Delta[sl], self.prev_delta[sl] = Delta, delta
        np.maximum(self.max_abs[sl], np.abs(x_next), out=self.max_abs[sl])
        return bad

    def finish(self):
        p = self.config.plant
        self.cost += np.where(self.divergent, 0.0, _dot(_mv(p.Q, self.x), self.x))
        self.cost[self.divergent] = np.inf


def simulate_trace(config: SimConfig, noise_seed_=None, channel_seed_=None) -> SimTrace:
    """One trace with full step records.

    Seeds may be integers or :class:`numpy.random.SeedSequence`; by default
    noise trace 0 and channel trace 0 of ``config.master_seed`` are used, so
    ``simulate_trace(cfg, noise_seed(s, a), channel_seed(s, c))`` reproduces
    trace ``(a, c)`` of :func:`monte_carlo`.
    """
    T, p = config.horizon, config.plant
    ns = noise_seed(config.master_seed, 0) if noise_seed_ is None else noise_seed_
    cs = channel_seed(config.master_seed, 0) if channel_seed_ is None else channel_seed_
    w = _draw_noise(p, T, [ns])[0]
    theta, delta = _draw_channel(config, [cs])
    theta, delta = theta[0], delta[0]
    rec = {"u_c": np.zeros((T, p.n_u)), "u": np.zeros((T, p.n_u)),
           "step_cost": np.zeros(T), "Delta": np.zeros(T, dtype=np.int64)}
    xs = np.zeros((T + 1, p.n_x))
    state = _Lockstep(config, 1)
    xs[0] = state.x[0]
    truncated = None
    for k in range(T):
        tp = theta[k - 1] if k > 0 else theta[0]
        bad = state.step(k, np.array([tp]), delta[k:k + 1], w[k:k + 1], record=rec)
        if bad[0]:
            truncated = k + 1
            xs[k + 1:] = np.nan
            rec["u"][k] = np.nan
            break
        xs[k + 1] = state.x[0]
    state.finish()
    end = T if truncated is None else truncated
    return SimTrace(
        k=np.arange(end), theta=theta[:end].copy(), delta=delta[:end].copy(), Delta=rec["Delta"][:end],
        x=xs[:end + 1], u=rec["u"][:end], u_c=rec["u_c"][:end], step_cost=rec["step_cost"][:end],
        total_cost=float(state.cost[0]), cost=float(state.cost[0]) / T,
        divergent=truncated is not None, truncated_at=truncated,
    )


def monte_carlo(config: SimConfig, workers: int | None = None, moment_burn_in: int | None = None,
                envelopes: bool = True) -> SimStats:
    """Run every noise x channel combination.

    ``moment_burn_in`` enables accumulation of ``x_k x_k'`` at reception
    instants (``delta_k = 1``) with ``k >= moment_burn_in``, per trace.
    Results are bit-identical for any ``workers``.
    """
    T, p = config.horizon, config.plant
    n_a, n_c = config.noise_traces, config.channel_traces
    n = n_a * n_c
    W = _draw_noise(p, T, [noise_seed(config.master_seed, a) for a in range(n_a)])
    theta, delta = _draw_channel(config, [channel_seed(config.master_seed, c) for c in range(n_c)])
    a_idx = np.repeat(np.arange(n_a), n_c)
    c_idx = np.tile(np.arange(n_c), n_a)
    state = _Lockstep(config, n)
    levels = np.array(ENVELOPE_LEVELS)
    env = np.zeros((len(levels), T + 1, p.n_x)) if envelopes else np.zeros((len(levels), 0, p.n_x))
    if envelopes:
        env[:, 0] = np.abs(config.x0)
    record_moments = moment_burn_in is not None
    m_sums = np.zeros((n, p.n_x, p.n_x)) if record_moments else None
    m_counts = np.zeros(n, dtype=np.int64) if record_moments else None

    n_workers = min(worker_count(workers), max(1, n // _MIN_CHUNK))
    bounds = np.linspace(0, n, n_workers + 1).astype(int)
    chunks = [slice(bounds[i], bounds[i + 1]) for i in range(n_workers)]
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None

    def advance(k, sl):
        c = c_idx[sl]
        tp = theta[c, k - 1] if k > 0 else theta[c, 0]
        d = delta[c, k]
        if record_moments and k >= moment_burn_in:
            x = state.x[sl]
            hit = (d == 1) & ~state.divergent[sl]
            with _quiet():
                m_sums[sl][hit] += x[hit, :, np.newaxis] * x[hit, np.newaxis, :]
            m_counts[sl] += hit
        state.step(k, tp, d, W[a_idx[sl], k], sl)

    try:
        for k in range(T):
            if pool is None:
                advance(k, slice(None))
            else:
                list(pool.map(lambda sl: advance(k, sl), chunks))
            if envelopes:
                ax = np.abs(state.x)
                if state.divergent.any():
                    ax = ax[~state.divergent]
                if ax.shape[0]:
                    env[:, k + 1] = np.quantile(ax, levels, axis=0)
    finally:
        if pool is not None:
            pool.shutdown()
    state.finish()
    max_abs = state.max_abs
    max_abs[state.divergent] = np.inf
    channel_longest = longest_bursts(delta)
    return SimStats(
        noise_traces=n_a, channel_traces=n_c, horizon=T, master_seed=int(config.master_seed),
        costs=state.cost / T, total_costs=state.cost, max_abs_state=max_abs,
        longest_burst=channel_longest[c_idx], channel_longest_burst=channel_longest,
        divergent=state.divergent, envelopes=env, moment_sums=m_sums, moment_counts=m_counts,
    )


def empirical_average_cost(stats: SimStats, exclusion_quantile: float = 1.0) -> float:
    """Mean horizon-normalised cost after dropping the most expensive traces.

    The cheapest ``round(exclusion_quantile * n)`` traces are kept.
    """
    if not 0 < exclusion_quantile <= 1:
        raise ValidationError(f"exclusion quantile must lie in (0, 1], got {exclusion_quantile}")
    costs = np.sort(stats.costs)
    keep = max(1, int(round(exclusion_quantile * costs.size)))
    return float(costs[:keep].mean())


def batch_longest_burst(channel: FsmcModel, horizon: int, batch_size: int, n_batches: int,
                        seed: int = 0, initial: np.ndarray | None = None) -> np.ndarray:
    """Longest burst within each of ``n_batches`` batches of channel traces."""
    out = np.empty(n_batches, dtype=np.int64)
    for b in range(n_batches):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2, b)))
        _, delta = sample_channel_traces(channel, horizon, rng.random((batch_size, 2 * horizon)), initial)
        out[b] = longest_bursts(delta).max()
    return out


def burst_propagation(plant: PlantSpec, x_tau: np.ndarray, u_tau: np.ndarray,
                      noise: np.ndarray) -> np.ndarray:
    """State after a reception at ``tau`` and ``h = len(noise) - 1`` dropouts.

    Closed form ``A^(h+1) x_tau + Psi_(h) u_tau + sum_j A^(h-j) w_(tau+j)``.
    """
    noise = np.atleast_2d(noise)
    h = noise.shape[0] - 1
    x = np.linalg.matrix_power(plant.A, h + 1) @ x_tau + psi(plant, h) @ u_tau
    for j in range(h + 1):
        x = x + np.linalg.matrix_power(plant.A, h - j) @ noise[j]
    return x


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def export_trace_csv(trace: SimTrace, path: str | Path, trace_id: int = 0) -> None:
    """Columns ``trace_id, k, theta, delta, Delta, x_1..x_n, u, u_c, step_cost`` (1-based theta)."""
    n_x, n_u = trace.x.shape[1], trace.u.shape[1]
    u_cols = ["u", "u_c"] if n_u == 1 else [f"u_{i + 1}" for i in range(n_u)] + [f"u_c_{i + 1}" for i in range(n_u)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trace_id", "k", "theta", "delta", "Delta"] + [f"x_{i + 1}" for i in range(n_x)]
                        + u_cols + ["step_cost"])
        for k in range(trace.k.size):
            writer.writerow([trace_id, k, int(trace.theta[k]) + 1, int(trace.delta[k]), int(trace.Delta[k])]
                            + [repr(float(v)) for v in trace.x[k]]
                            + [repr(float(v)) for v in trace.u[k]] + [repr(float(v)) for v in trace.u_c[k]]
                            + [repr(float(trace.step_cost[k]))])


def stats_summary(stats: SimStats, exclusion_quantile: float | None = None) -> dict:
    doc = {
        "noise_traces": stats.noise_traces,
        "channel_traces": stats.channel_traces,
        "horizon": stats.horizon,
        "master_seed": stats.master_seed,
        "divergent_traces": stats.divergent_count,
        "average_cost_all": empirical_average_cost(stats, 1.0),
        "longest_burst_histogram": {str(k): v for k, v in stats.burst_histogram().items()},
    }
    if exclusion_quantile is not None:
        doc["exclusion_quantile"] = exclusion_quantile
        doc["average_cost_kept"] = empirical_average_cost(stats, exclusion_quantile)
    return doc


def export_stats(stats: SimStats, out_dir: str | Path, exclusion_quantile: float | None = None) -> list[Path]:
    """Write ``envelopes.csv``, ``trace_costs.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_levels, n_steps, n_x = stats.envelopes.shape
    tags = ["p50", "p95", "p99.9", "max"]
    lines = [",".join(["k"] + [f"x_{i + 1}_{t}" for i in range(n_x) for t in tags])]
    for k in range(n_steps):
        lines.append(",".join([str(k)] + [repr(float(stats.envelopes[l, k, i]))
                                          for i in range(n_x) for l in range(n_levels)]))
    paths = [out / "envelopes.csv", out / "trace_costs.csv", out / "summary.json"]
    _atomic_write(paths[0], "\n".join(lines) + "\n")
    rows = ["trace_id,noise_index,channel_index,cost,longest_burst,divergent"]
    for t in range(stats.n_traces):
        a, c = divmod(t, stats.channel_traces)
        rows.append(f"{t},{a},{c},{float(stats.costs[t])!r},{int(stats.longest_burst[t])},{int(stats.divergent[t])}")
    _atomic_write(paths[1], "\n".join(rows) + "\n")
    _atomic_write(paths[2], json.dumps(stats_summary(stats, exclusion_quantile), indent=2) + "\n")
    return paths
