"""Channel-state-dependent LQR synthesis under generalized dropout compensation.

The controller applies ``u_k^c = K_(k, theta_{k-1}) x_k``; when a packet
is lost the actuator applies ``Phi u_{k-1}``.  Gains follow from coupled
Riccati recursions averaged over every burst length ``h = 0..L``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    BaselineUnstabilizableError,
    MjlsError,
    NotStabilizableError,
    SynthesisError,
    ValidationError,
)
from .fsmc import BurstStats

__all__ = [
    "PlantSpec",
    "GainSchedule",
    "StationaryGains",
    "SweepRow",
    "psi",
    "horizon_clip",
    "finite_horizon_lqr",
    "finite_horizon_cost",
    "infinite_horizon_lqr",
    "long_run_cost",
    "sweep_phi",
    "bernoulli_baseline",
    "export_schedule_csv",
    "save_gains",
    "load_gains",
]

_PSD_TOL = -1e-10


def _matrix(value, name, shape=None):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def _check_psd(M, name, strict=False):
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValidationError(f"{name} must be symmetric")
    lo = np.linalg.eigvalsh((M + M.T) / 2).min()
    if strict and lo <= 0:
        raise ValidationError(f"{name} must be positive definite (min eigenvalue {lo:.3e})")
    if lo < _PSD_TOL:
        raise ValidationError(f"{name} must be positive semidefinite (min eigenvalue {lo:.3e})")


@dataclass(frozen=True, eq=False)
class PlantSpec:
    """Discrete-time plant, cost weights and dropout compensation.

    ``Phi`` may be given as a diagonal matrix or as the vector of its
    diagonal entries, each in ``[0, 1]``.
    """

    A: np.ndarray
    B: np.ndarray
    Sigma_w: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Phi: np.ndarray
    x0: np.ndarray | None = None

    def __post_init__(self):
        A = _matrix(self.A, "A")
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise ValidationError(f"A must be square, got {A.shape}")
        B = np.array(self.B, dtype=np.float64)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        B = _matrix(B, "B")
        if B.shape[0] != n_x:
            raise ValidationError(f"B has {B.shape[0]} rows, A has {n_x}")
        n_u = B.shape[1]
        Sigma_w = _matrix(self.Sigma_w, "Sigma_w", (n_x, n_x))
        Q = _matrix(self.Q, "Q", (n_x, n_x))
        R = _matrix(self.R, "R", (n_u, n_u))
        _check_psd(Sigma_w, "Sigma_w")
        _check_psd(Q, "Q")
        _check_psd(R, "R", strict=True)
        Phi = np.array(self.Phi, dtype=np.float64)
        if Phi.ndim <= 1:
            Phi = np.diag(np.broadcast_to(Phi.reshape(-1), (n_u,)).copy())
        Phi = _matrix(Phi, "Phi", (n_u, n_u))
        if np.any(Phi != np.diag(np.diag(Phi))):
            raise ValidationError("Phi must be diagonal")
        if np.any((np.diag(Phi) < 0) | (np.diag(Phi) > 1)):
            raise ValidationError("diagonal entries of Phi must lie in [0, 1]")
        x0 = np.zeros(n_x) if self.x0 is None else np.array(self.x0, dtype=np.float64).reshape(-1)
        if x0.shape != (n_x,):
            raise ValidationError(f"x0 must have length {n_x}")
        for name, arr in dict(A=A, B=B, Sigma_w=Sigma_w, Q=Q, R=R, Phi=Phi, x0=x0).items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def phi(self) -> np.ndarray:
        return np.diag(self.Phi).copy()

    def with_phi(self, phi) -> "PlantSpec":
        return replace(self, Phi=np.array(phi, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, PlantSpec):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("A", "B", "Sigma_w", "Q", "R", "Phi", "x0"))


def psi(plant: PlantSpec, n: int) -> np.ndarray:
    """``Psi_(n) = sum_{j=0..n} A^j B Phi^(n-j)``; the input-to-state map of a burst."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    out = plant.B.copy()
    Phi_pow = np.eye(plant.n_u)
    for _ in range(n):
        Phi_pow = Phi_pow @ plant.Phi
        out = plant.A @ out + plant.B @ Phi_pow
    return out


def horizon_clip(k: int, L: int, T: int) -> int:
    """``xi_k = max(0, k + 1 + L - T)``: burst lengths that would outlive the horizon."""
    return max(0, k + 1 + L - T)


class _BurstTerms:
    """Constant (Riccati-independent) pieces of the recursion, cached per burst length."""

    def __init__(self, plant: PlantSpec, stats: BurstStats):
        L = stats.L
        A, B, Q, R, Phi, Sw = plant.A, plant.B, plant.Q, plant.R, plant.Phi, plant.Sigma_w
        n_x, n_u = plant.n_x, plant.n_u
        Apow = np.empty((L + 2, n_x, n_x))
        Apow[0] = np.eye(n_x)
        for h in range(1, L + 2):
            Apow[h] = A @ Apow[h - 1]
        Psi = np.empty((L + 1, n_x, n_u))
        Psi[0] = B
        Phi_pow = np.eye(n_u)
        for h in range(1, L + 1):
            Phi_pow = Phi_pow @ Phi
            Psi[h] = A @ Psi[h - 1] + B @ Phi_pow
        # r-sums up to h: r = 1..h
        qa = np.zeros((L + 1, n_u, n_x))
        bb = np.zeros((L + 1, n_u, n_u))
        aa = np.zeros((L + 1, n_x, n_x))
        Phi_pow = np.eye(n_u)
        for h in range(1, L + 1):
            Phi_pow = Phi_pow @ Phi
            P = Psi[h - 1]
            qa[h] = qa[h - 1] + P.T @ Q @ Apow[h]
            bb[h] = bb[h - 1] + Phi_pow.T @ R @ Phi_pow + P.T @ Q @ P
            aa[h] = aa[h - 1] + Apow[h].T @ Q @ Apow[h]
        # noise: tr(A^v' Q A^v Sw) summed over v < r, r <= h
        tr_q = np.array([np.trace(Apow[v].T @ Q @ Apow[v] @ Sw) for v in range(L + 1)])
        nested = np.concatenate([[0.0], np.cumsum(np.cumsum(tr_q)[:-1])])
        # sum_{v<=h} A^v Sw A^v'
        noise_acc = np.cumsum(np.einsum("hab,bc,hdc->had", Apow[:L + 1], Sw, Apow[:L + 1]), axis=0)

        self.L = L
        self.Apow = Apow
        self.Psi = Psi
        self.A_next = Apow[1:]              # A^{h+1}, h = 0..L
        self.stage_cost_noise = nested      # nested trace sum, per h
        self.noise_acc = noise_acc          # W-type accumulation, per h
        self.zeta = stats.zeta
        self.varsigma_by_i = np.transpose(stats.varsigma, (2, 0, 1))  # [i, h, j]
        self.R = R
        self.Q = Q
        # prefix sums over h of q_ih * (r-sums): index H gives sum_{h <= H}
        q = stats.q
        self.cC = np.cumsum(np.einsum("ih,hab->ihab", q, qa), axis=1)
        self.cB = np.cumsum(np.einsum("ih,hab->ihab", q, bb), axis=1)
        self.cA = np.cumsum(np.einsum("ih,hab->ihab", q, aa), axis=1)

    def step(self, X_future: np.ndarray, g_future: np.ndarray, H: int):
        """One Riccati update for every channel state.

        ``X_future[h, j]`` and ``g_future[h, j]`` are the quantities at time
        ``k + 1 + h`` for ``h = 0..H``.
        """
        hs = slice(0, H + 1)
        zeta = self.zeta[:, hs]
        Wx = np.einsum("ihj,hjab->ihab", zeta, X_future)
        Psi = self.Psi[hs]
        An = self.A_next[hs]
        C = self.cC[:, H] + np.einsum("hak,ihab,hbc->ikc", Psi, Wx, An)
        Bm = self.R + self.cB[:, H] + np.einsum("hak,ihab,hbl->ikl", Psi, Wx, Psi)
        Am = self.Q + self.cA[:, H] + np.einsum("hba,ihbc,hcd->iad", An, Wx, An)
        N = C.shape[0]
        K = np.empty_like(C)
        X = np.empty_like(Am)
        for i in range(N):
            try:
                factor = cho_factor(Bm[i])
            except LinAlgError:
                raise SynthesisError(f"B-weight of state {i + 1} is not positive definite") from None
            BinvC = cho_solve(factor, C[i])
            K[i] = -BinvC
            Xi = Am[i] - C[i].T @ BinvC
            X[i] = 0.5 * (Xi + Xi.T)
        traces = np.einsum("hjab,hba->hj", X_future, self.noise_acc[hs])
        g = np.einsum("ihj,hj->i", self.varsigma_by_i[:, hs],
                      self.stage_cost_noise[hs, np.newaxis] + traces + g_future)
        return K, X, g, Bm


@dataclass(eq=False)
class GainSchedule:
    """Time-varying gains of the finite-horizon regulator.

    ``K[k, i]`` is the gain applied at step ``k`` when ``theta_{k-1}`` is
    state ``i``; ``X[k, i]`` and ``g[k, i]`` are the cost-to-go matrix and
    offset (``k = 0..T``, with ``X[T] = Q`` and ``g[T] = 0``).
    """

    horizon: int
    K: np.ndarray
    X: np.ndarray | None
    g: np.ndarray | None
    psi_cache: np.ndarray = field(repr=False)
    L: int = 0

    def gain(self, k: int, state: int) -> np.ndarray:
        return self.K[k, state]


@dataclass(eq=False)
class StationaryGains:
    """Infinite-horizon gains ``K[i]`` and coupled Riccati solution ``X[i]``."""

    K: np.ndarray
    X: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    rho: float | None = None
    warnings: list[str] = field(default_factory=list)
    label: str = ""

    @property
    def n_states(self) -> int:
        return self.K.shape[0]


def _check_dims(plant: PlantSpec, stats: BurstStats):
    if stats.zeta.shape[0] != stats.n_states:
        raise ValidationError("burst statistics are inconsistent")


def finite_horizon_lqr(plant: PlantSpec, stats: BurstStats, T: int,
                       keep_riccati: bool = True) -> GainSchedule:
    """Backward recursion for the finite-horizon regulator over ``k = T-1..0``.

    Only ``L + 1`` future slices of the cost-to-go are needed at any
    step; ``keep_riccati=False`` stores no more than that window.
    """
    if int(T) != T or T < 1:
        raise ValidationError(f"horizon must be a positive integer, got {T}")
    T = int(T)
    _check_dims(plant, stats)
    terms = _BurstTerms(plant, stats)
    L, N, n_x, n_u = stats.L, stats.n_states, plant.n_x, plant.n_u
    K_all = np.empty((T, N, n_u, n_x))
    X_all = np.empty((T + 1, N, n_x, n_x)) if keep_riccati else None
    g_all = np.empty((T + 1, N)) if keep_riccati else None
    # window[h] holds time k+1+h
    win_X = np.empty((L + 1, N, n_x, n_x))
    win_g = np.zeros((L + 1, N))
    win_X[0] = plant.Q
    win_g[0] = 0.0
    if keep_riccati:
        X_all[T] = plant.Q
        g_all[T] = 0.0
    for k in range(T - 1, -1, -1):
        H = L - horizon_clip(k, L, T)
        if k + 1 + H > T:
            raise AssertionError("recursion reached beyond the horizon")
        K, X, g, _ = terms.step(win_X[:H + 1], win_g[:H + 1], H)
        K_all[k] = K
        win_X[1:] = win_X[:-1].copy()
        win_g[1:] = win_g[:-1].copy()
        win_X[0] = X
        win_g[0] = g
        if keep_riccati:
            X_all[k] = X
            g_all[k] = g
    return GainSchedule(T, K_all, X_all, g_all, terms.Psi, L)


def finite_horizon_cost(schedule: GainSchedule, plant: PlantSpec | None = None,
                        theta_init: np.ndarray | None = None, x0: np.ndarray | None = None) -> float:
    """Optimal expected cost ``x0' (sum_i theta_i X_(0,i)) x0 + sum_i theta_i g_(0,i)``."""
    if schedule.X is None:
        raise ValidationError("schedule was built without Riccati history")
    N = schedule.K.shape[1]
    theta = np.full(N, 1.0 / N) if theta_init is None else np.asarray(theta_init, dtype=np.float64)
    if x0 is None:
        x0 = plant.x0 if plant is not None else np.zeros(schedule.X.shape[-1])
    x0 = np.asarray(x0, dtype=np.float64)
    Xbar = np.einsum("i,iab->ab", theta, schedule.X[0])
    return float(x0 @ Xbar @ x0 + theta @ schedule.g[0])


def infinite_horizon_lqr(plant: PlantSpec, stats: BurstStats, tol: float = 1e-10,
                         max_iter: int = 100_000, X_init: np.ndarray | None = None,
                         check_stability: bool = True) -> StationaryGains:
    """Stationary gains as the fixed point of the recursion with no horizon clipping.

    Iterates until ``max|X_new - X| <= tol * max(1, max|X|)``.  The
    resulting closed loop is checked with the mean-square stability test;
    a warning is attached (and emitted) if it fails.
    """
    _check_dims(plant, stats)
    terms = _BurstTerms(plant, stats)
    L, N = stats.L, stats.n_states
    X = np.broadcast_to(plant.Q, (N,) + plant.Q.shape).copy() if X_init is None else np.array(X_init)
    zeros = np.zeros((L + 1, N))
    delta = np.inf
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):   # divergence is reported below
            K, X_new, _, _ = terms.step(np.broadcast_to(X, (L + 1,) + X.shape), zeros, L)
        if not np.all(np.isfinite(X_new)):
            raise NotStabilizableError(f"Riccati iterates diverged after {it} iterations")
        delta = np.abs(X_new - X).max()
        X = X_new
        if delta <= tol * max(1.0, np.abs(X).max()):
            break
    else:
        raise NotStabilizableError(
            f"coupled Riccati iteration did not converge in {max_iter} iterations (last change {delta:.3e})"
        )
    K, _, _, _ = terms.step(np.broadcast_to(X, (L + 1,) + X.shape), zeros, L)
    sol = StationaryGains(K=K, X=X, iterations=it, residual=float(delta), label="proposed")
    if check_stability:
        from .stability import spectral_radius

        rho = spectral_radius(plant, stats, K)
        sol.rho = rho
        if not rho < 1.0:
            msg = f"synthesized gains fail the mean-square stability test (rho = {rho:.6f})"
            sol.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return sol


def long_run_cost(plant: PlantSpec, stats: BurstStats, X: np.ndarray) -> float:
    """Long-run average cost of the stationary regulator with Riccati solution ``X``."""
    if stats.pi_stat is None:
        raise ValidationError("burst steady state unavailable (channel not ergodic)")
    terms = _BurstTerms(plant, stats)
    traces = np.einsum("jab,hba->hj", np.asarray(X), terms.noise_acc)
    per_burst = terms.stage_cost_noise[:, np.newaxis] + traces
    return float(np.sum(stats.pi_stat * per_burst))


@dataclass
class SweepRow:
    phi: float
    K: np.ndarray | None
    rho: float | None
    J_inf: float | None
    error: str | None = None


def _sweep_point(plant, stats, phi, tol, max_iter):
    from .stability import spectral_radius

    p = plant.with_phi(phi)
    try:
        sol = infinite_horizon_lqr(p, stats, tol=tol, max_iter=max_iter, check_stability=False)
        rho = spectral_radius(p, stats, sol.K)
        return SweepRow(float(phi), sol.K, rho, long_run_cost(p, stats, sol.X))
    except MjlsError as exc:
        return SweepRow(float(phi), None, None, None, f"{type(exc).__name__}: {exc}")


def sweep_phi(plant: PlantSpec, stats: BurstStats, grid, tol: float = 1e-10,
              max_iter: int = 100_000, workers: int = 1) -> list[SweepRow]:
    """Synthesis and stability evaluation for each scalar compensation factor in ``grid``.

    Failing grid points are reported in ``SweepRow.error`` without
    aborting the sweep.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValidationError("empty compensation grid")
    if workers <= 1:
        return [_sweep_point(plant, stats, phi, tol, max_iter) for phi in grid]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda v: _sweep_point(plant, stats, v, tol, max_iter), grid))


def bernoulli_baseline(plant: PlantSpec, arrival_probability: float, tol: float = 1e-13,
                       max_iter: int = 1_000_000) -> StationaryGains:
    """Channel-state-independent gain from the modified Riccati equation.

    ``X = A'XA + Q - nu A'XB (B'XB + R)^-1 B'XA`` with ``nu`` the packet
    arrival probability; ``K = -(B'XB + R)^-1 B'XA``.
    """
    nu = float(arrival_probability)
    if not 0.0 < nu <= 1.0:
        raise ValidationError(f"arrival probability must lie in (0, 1], got {nu}")
    A, B, Q, R = plant.A, plant.B, plant.Q, plant.R
    X = Q.copy()
    for it in range(1, max_iter + 1):
        BX = B.T @ X
        G = np.linalg.solve(BX @ B + R, BX @ A)
        X_new = A.T @ X @ A + Q - nu * (A.T @ X @ B) @ G
        X_new = 0.5 * (X_new + X_new.T)
        if not np.all(np.isfinite(X_new)) or np.abs(X_new).max() > 1e300:
            raise BaselineUnstabilizableError(f"modified Riccati iterates diverged (nu = {nu})")
        delta = np.abs(X_new - X).max()
        X = X_new
        if delta <= tol * max(1.0, np.abs(X).max()):
            break
    else:
        raise BaselineUnstabilizableError(f"modified Riccati iteration did not converge (nu = {nu})")
    K = -np.linalg.solve(B.T @ X @ B + R, B.T @ X @ A)
    return StationaryGains(K=K[np.newaxis], X=X[np.newaxis], iterations=it, residual=float(delta),
                           label="bernoulli")


def modified_riccati_residual(plant: PlantSpec, X: np.ndarray, nu: float) -> float:
    A, B, Q, R = plant.A, plant.B, plant.Q, plant.R
    G = np.linalg.solve(B.T @ X @ B + R, B.T @ X @ A)
    return float(np.abs(A.T @ X @ A + Q - nu * (A.T @ X @ B) @ G - X).max())


def export_schedule_csv(schedule: GainSchedule, path: str | Path) -> None:
    """Rows ``(k, state_index, row, col, value)``; states are 1-based."""
    T, N, n_u, n_x = schedule.K.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "state_index", "row", "col", "value"])
        for k in range(T):
            for i in range(N):
                for r in range(n_u):
                    for c in range(n_x):
                        writer.writerow([k, i + 1, r, c, repr(float(schedule.K[k, i, r, c]))])


def gains_to_dict(K: np.ndarray, label: str = "", source: str = "") -> dict:
    K = np.asarray(K)
    doc = {"label": label, "source": source, "gains": {}}
    for i, Ki in enumerate(K):
        doc["gains"][str(i + 1)] = {"shape": list(Ki.shape), "data": Ki.reshape(-1).tolist()}
    return doc


def gains_from_dict(doc: dict, n_states: int | None = None) -> np.ndarray:
    """Gain stack ``(N, n_u, n_x)`` from a document keyed by 1-based channel state.

    A document with a single key ``"all"`` (or a single state when
    ``n_states > 1``) is broadcast to every state.
    """
    from .config import parse_array

    table = doc.get("gains", doc)
    if "all" in table:
        K = parse_array(table["all"], "gains.all", ndim=2)
        if n_states is None:
            raise ValidationError("channel state count needed to broadcast a shared gain")
        return np.broadcast_to(K, (n_states,) + K.shape).copy()
    try:
        keys = sorted(table, key=int)
    except ValueError:
        raise ValidationError(f"gain keys must be 1-based channel states, got {list(table)}") from None
    if [int(k) for k in keys] != list(range(1, len(keys) + 1)):
        raise ValidationError(f"gain keys must be 1..N, got {keys}")
    K = np.stack([parse_array(table[k], f"gains.{k}", ndim=2) for k in keys])
    if n_states is not None and K.shape[0] != n_states:
        if K.shape[0] == 1:
            return np.broadcast_to(K[0], (n_states,) + K.shape[1:]).copy()
        raise ValidationError(f"gain file covers {K.shape[0]} states, channel has {n_states}")
    return K


def save_gains(K: np.ndarray, path: str | Path, label: str = "", source: str = "") -> None:
    with open(path, "w") as fh:
        json.dump(gains_to_dict(K, label, source), fh, indent=2)
        fh.write("\n")


def load_gains(path: str | Path, n_states: int | None = None) -> np.ndarray:
    with open(path) as fh:
        return gains_from_dict(json.load(fh), n_states)
