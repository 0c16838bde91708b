"""Finite-state Markov channel (FSMC) model and packet error burst statistics.

Channel states are 0-based in every array of this module.  File and CSV
I/O use 1-based state labels.

Array layouts used throughout the package:

``varsigma[n, j, i]``
    component ``i`` of the burst vector for a burst of ``n`` dropouts
    ending in state ``j`` (the vector is indexed by the state that
    delivered the previous packet).
``zeta[i, n, j]``
    probability of an ``n``-long burst ending in ``j`` given that the
    last known channel state before the previous delivery was ``i``.
``q[i, n]``
    ``zeta[i, n, :].sum()``.
``pi_stat[n, j]``
    steady-state probability of bursts of length ``n`` ending in ``j``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import (
    CapExceededError,
    ConvergenceError,
    DegenerateStateError,
    ErgodicityError,
    ValidationError,
)

__all__ = [
    "DEFAULT_EPSILON",
    "MAX_BURST_CAP",
    "FsmcModel",
    "BurstStats",
    "Ergodicity",
    "split_tpm",
    "burst_distribution",
    "zeta",
    "max_burst_length",
    "stationary_distribution",
    "burst_steady_state",
    "ergodicity_check",
    "burst_stats",
    "sample_channel_trace",
    "sample_channel_traces",
    "load_channel",
    "save_channel",
    "export_burst_csv",
]

DEFAULT_EPSILON = 2.0**-52
MAX_BURST_CAP = 512

_STOCHASTIC_TOL = 1e-12


def _as_matrix(value, name):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class FsmcModel:
    """Channel transition matrix ``P_c`` and per-state delivery probabilities.

    ``P_c[i, j]`` is the probability of moving from state ``i`` to ``j``;
    ``delta_hat[i]`` is the probability that a packet sent while the
    channel is in state ``i`` is delivered.
    """

    P_c: np.ndarray
    delta_hat: np.ndarray

    def __post_init__(self):
        P_c = _as_matrix(self.P_c, "P_c")
        delta_hat = np.array(self.delta_hat, dtype=np.float64).reshape(-1)
        if delta_hat.shape[0] != P_c.shape[0]:
            raise ValidationError(
                f"delta_hat has {delta_hat.shape[0]} entries, P_c has {P_c.shape[0]} states"
            )
        if not np.all(np.isfinite(P_c)) or np.any(P_c < 0):
            raise ValidationError("P_c entries must be finite and nonnegative")
        row_err = np.abs(P_c.sum(axis=1) - 1.0)
        if np.any(row_err > _STOCHASTIC_TOL):
            bad = int(np.argmax(row_err)) + 1
            raise ValidationError(f"row {bad} of P_c does not sum to 1 (error {row_err.max():.3e})")
        if np.any((delta_hat < 0) | (delta_hat > 1)) or not np.all(np.isfinite(delta_hat)):
            raise ValidationError("delta_hat entries must lie in [0, 1]")
        if np.all(delta_hat == 0):
            raise DegenerateStateError("delta_hat is identically zero: no packet is ever delivered")
        success = (P_c * delta_hat) @ np.ones(len(delta_hat))
        dead = np.flatnonzero(success <= 0)
        if dead.size:
            raise DegenerateStateError(
                f"no successful delivery is possible right after state(s) {(dead + 1).tolist()}"
            )
        P_c.setflags(write=False)
        delta_hat.setflags(write=False)
        object.__setattr__(self, "P_c", P_c)
        object.__setattr__(self, "delta_hat", delta_hat)

    @property
    def n_states(self) -> int:
        return self.P_c.shape[0]

    @property
    def lossless(self) -> bool:
        return bool(np.all(self.delta_hat == 1.0))

    def __eq__(self, other):
        if not isinstance(other, FsmcModel):
            return NotImplemented
        return np.array_equal(self.P_c, other.P_c) and np.array_equal(self.delta_hat, other.delta_hat)

    def to_dict(self) -> dict:
        N = self.n_states
        return {
            "P_c": {"shape": [N, N], "data": self.P_c.reshape(-1).tolist()},
            "delta_hat": {"shape": [N], "data": self.delta_hat.tolist()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FsmcModel":
        from .config import parse_array

        try:
            return cls(parse_array(doc["P_c"], "P_c", ndim=2), parse_array(doc["delta_hat"], "delta_hat", ndim=1))
        except KeyError as exc:
            raise ValidationError(f"channel document is missing field {exc}") from None


def split_tpm(model: FsmcModel) -> tuple[np.ndarray, np.ndarray]:
    """Split ``P_c`` into delivery (``P1``) and dropout (``P0``) parts.

    ``P1[i, j] = P_c[i, j] * delta_hat[j]`` and ``P0 = P_c - P1``.
    """
    P1 = model.P_c * model.delta_hat[np.newaxis, :]
    P0 = model.P_c * (1.0 - model.delta_hat)[np.newaxis, :]
    return P1, P0


def _power_cache(P0: np.ndarray, n_max: int) -> np.ndarray:
    powers = np.empty((n_max + 1,) + P0.shape)
    powers[0] = np.eye(P0.shape[0])
    for n in range(1, n_max + 1):
        powers[n] = powers[n - 1] @ P0
    return powers


def max_burst_length(P1: np.ndarray, P0: np.ndarray, epsilon: float = DEFAULT_EPSILON,
                     cap: int = MAX_BURST_CAP) -> int:
    """Smallest positive ``L`` whose truncated burst mass reaches ``1 - epsilon``.

    Because ``(P0 + P1) 1 = 1``, the cumulative mass
    ``sum_{n<=L} sum_j varsigma_(n,j)`` equals ``1 - P0^(L+1) 1``.  The
    scan tests the tail ``P0^(L+1) 1 <= epsilon`` directly, which avoids
    the cancellation in ``1 - sum`` when ``epsilon`` is near machine
    precision.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
    tail = P0.sum(axis=1)          # P0^(n+1) 1 for n = 0
    for n in range(cap + 1):
        if n >= 1 and np.all(tail <= epsilon):
            return n
        tail = P0 @ tail
    raise CapExceededError(
        f"burst mass still below 1 - {epsilon:g} at length {cap}; worst tail {tail.max():.3e}"
    )


class Ergodicity(NamedTuple):
    ergodic: bool
    diagnosis: str


def ergodicity_check(P: FsmcModel | np.ndarray, support: np.ndarray | None = None) -> Ergodicity:
    """Irreducibility and aperiodicity of a transition matrix by graph analysis.

    ``support`` restricts the check to a subset of states (a boolean mask).
    """
    mat = P.P_c if isinstance(P, FsmcModel) else np.asarray(P)
    if support is not None:
        mat = mat[np.ix_(support, support)]
    adj = mat > 0
    n_classes, labels = connected_components(adj, directed=True, connection="strong")
    if n_classes > 1:
        return Ergodicity(False, f"reducible: {n_classes} communicating classes")
    period = _period(adj)
    if period > 1:
        return Ergodicity(False, f"periodic: period {period}")
    return Ergodicity(True, "irreducible and aperiodic")


def _period(adj: np.ndarray) -> int:
    # gcd of level differences over all edges of a BFS from state 0
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u, v in zip(*np.nonzero(adj)):
        g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def stationary_distribution(model: FsmcModel | np.ndarray, tol: float = 1e-13,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of an ergodic chain by power iteration."""
    P = model.P_c if isinstance(model, FsmcModel) else np.asarray(model, dtype=np.float64)
    check = ergodicity_check(P)
    if not check.ergodic:
        raise ErgodicityError(check.diagnosis)
    theta = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = theta @ P
        nxt /= nxt.sum()
        if np.abs(nxt - theta).sum() < tol:
            return nxt
        theta = nxt
    raise ConvergenceError(f"stationary distribution did not converge in {max_iter} iterations")


@dataclass(frozen=True, eq=False)
class BurstStats:
    """Burst statistics of a channel truncated at the maximal burst length ``L``."""

    model: FsmcModel
    P1: np.ndarray
    P0: np.ndarray
    L: int
    epsilon: float
    P0_powers: np.ndarray = field(repr=False)
    varsigma: np.ndarray = field(repr=False)
    zeta: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    theta_stat: np.ndarray | None = field(default=None, repr=False)
    pi_stat: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.P1.shape[0]

    @property
    def truncation_mass(self) -> np.ndarray:
        """Per-state probability mass lost by truncating bursts at ``L``."""
        return 1.0 - self.q.sum(axis=1)


def burst_distribution(stats: BurstStats, n: int, j: int) -> np.ndarray:
    """``varsigma_(n,j) = P0^n e_j (e_j^T P1 1)`` as a length-N vector."""
    N = stats.n_states
    if n < 0 or not 0 <= j < N:
        raise IndexError(f"burst index out of range: n={n}, j={j}")
    if n <= stats.L:
        return stats.varsigma[n, j].copy()
    P0n = np.linalg.matrix_power(stats.P0, n)
    return P0n[:, j] * stats.P1[j].sum()


def zeta(stats: BurstStats, i: int, n: int, j: int) -> float:
    """Probability of an ``n``-dropout burst ending in ``j`` after last known state ``i``."""
    if n <= stats.L:
        return float(stats.zeta[i, n, j])
    vec = burst_distribution(stats, n, j)
    return float(stats.P1[i] @ vec / stats.P1[i].sum())


def _varsigma_table(P1, P0_powers):
    success = P1.sum(axis=1)
    # varsigma[n, j, i] = (P0^n)[i, j] * success[j]
    return np.transpose(P0_powers, (0, 2, 1)) * success[np.newaxis, :, np.newaxis]


def burst_steady_state(stats: BurstStats, initial: np.ndarray | None = None, kernel: str = "varsigma",
                       tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of the burst distribution recursion, shape ``(L+1, N)``.

    With ``kernel="varsigma"`` the update is
    ``pi'(l, i) = sum_{h,j} pi(h, j) e_j^T varsigma_(l,i)``, seeded by
    ``pi(h, j) = sum_i theta_i e_i^T varsigma_(h,j)``.  This is the
    distribution weighting the long-run cost.

    ``kernel="zeta"`` instead chains bursts through the delivery step,
    ``pi'(l, i) = sum_{h,j} pi(h, j) zeta_(j,l,i)``; its length marginal
    is the true steady-state law of burst lengths between deliveries.
    """
    N, L = stats.n_states, stats.L
    if initial is None:
        theta = stats.theta_stat if stats.theta_stat is not None else stationary_distribution(stats.model)
        pi = np.einsum("i,hji->hj", theta, stats.varsigma)
    else:
        pi = np.array(initial, dtype=np.float64).reshape(L + 1, N)
    pi = pi / pi.sum()
    if kernel == "varsigma":
        step = lambda p: np.einsum("j,lij->li", p.sum(axis=0), stats.varsigma)
    elif kernel == "zeta":
        step = lambda p: np.einsum("hj,jli->li", p, stats.zeta)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    for _ in range(max_iter):
        nxt = step(pi)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise ConvergenceError(f"burst steady state did not converge in {max_iter} iterations")


def burst_stats(model: FsmcModel, epsilon: float = DEFAULT_EPSILON, L: int | None = None,
                cap: int = MAX_BURST_CAP) -> BurstStats:
    """Build every burst statistic for ``model``.

    ``L`` overrides the computed maximal burst length (``L=0`` forces a
    single-slot truncation, used for reductions to classical LQR).
    """
    P1, P0 = split_tpm(model)
    if L is None:
        L = max_burst_length(P1, P0, epsilon, cap)
    elif L < 0 or L > cap:
        raise ValidationError(f"burst length override {L} outside [0, {cap}]")
    powers = _power_cache(P0, L)
    vs = _varsigma_table(P1, powers)
    success = P1.sum(axis=1)
    z = np.einsum("ik,hjk->ihj", P1, vs) / success[:, np.newaxis, np.newaxis]
    q = z.sum(axis=2)
    for arr in (P1, P0, powers, vs, z, q):
        arr.setflags(write=False)
    stats = BurstStats(model, P1, P0, int(L), float(epsilon), powers, vs, z, q)
    check = ergodicity_check(model)
    if check.ergodic:
        theta = stationary_distribution(model)
        object.__setattr__(stats, "theta_stat", theta)
        object.__setattr__(stats, "pi_stat", burst_steady_state(stats, kernel="varsigma"))
    return stats


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_channel_traces(model: FsmcModel, horizon: int, uniforms: np.ndarray,
                          initial: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Channel states and delivery outcomes driven by pre-drawn uniforms.

    ``uniforms`` has shape ``(n_traces, 2 * horizon)``: even columns drive
    the state chain (column 0 draws the initial state), odd columns the
    delivery outcomes.  Returns ``theta`` (int) and ``delta`` (0/1 int),
    both of shape ``(n_traces, horizon)``.
    """
    u = np.asarray(uniforms)
    n_traces = u.shape[0]
    if horizon < 1 or u.shape[1] < 2 * horizon:
        raise ValidationError("need horizon >= 1 and two uniforms per step")
    N = model.n_states
    init = np.full(N, 1.0 / N) if initial is None else np.asarray(initial, dtype=np.float64)
    cum_init = np.cumsum(init)
    cum_init[-1] = 1.0
    cum_rows = np.cumsum(model.P_c, axis=1)
    cum_rows[:, -1] = 1.0
    theta = np.empty((n_traces, horizon), dtype=np.int64)
    theta[:, 0] = np.searchsorted(cum_init, u[:, 0], side="right")
    for k in range(1, horizon):
        rows = cum_rows[theta[:, k - 1]]
        theta[:, k] = (rows <= u[:, 2 * k, np.newaxis]).sum(axis=1)
    np.minimum(theta, N - 1, out=theta)
    delta = (u[:, 1:2 * horizon:2] < model.delta_hat[theta]).astype(np.int64)
    return theta, delta


def sample_channel_trace(model: FsmcModel, horizon: int, seed=None,
                         initial: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One channel trace ``(theta_k, delta_k)`` for ``k = 0..horizon-1``.

    Deterministic for a fixed ``seed``; ``initial`` is the distribution of
    ``theta_0`` (uniform by default).
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    u = _rng(seed).random((1, 2 * horizon))
    theta, delta = sample_channel_traces(model, horizon, u, initial)
    return theta[0], delta[0]


def load_channel(path: str | Path) -> FsmcModel:
    with open(path) as fh:
        doc = json.load(fh)
    return FsmcModel.from_dict(doc.get("channel", doc))


def save_channel(model: FsmcModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


def export_burst_csv(stats: BurstStats, path: str | Path) -> None:
    """Write rows ``(i, n, j, varsigma_component, zeta)`` with 1-based states."""
    N, L = stats.n_states, stats.L
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "n", "j", "varsigma_component", "zeta"])
        for i in range(N):
            for n in range(L + 1):
                for j in range(N):
                    writer.writerow([i + 1, n, j + 1, repr(float(stats.varsigma[n, j, i])),
                                     repr(float(stats.zeta[i, n, j]))])
