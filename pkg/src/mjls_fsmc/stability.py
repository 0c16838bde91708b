"""Mean-square stability of the closed loop for a given stationary gain set.

The loop is analysed at reception instants through augmented modes
``(theta at reception, preceding burst length, last known state before
the previous reception)``.  Mode-conditioned second moments evolve
linearly; the loop is mean-square stable iff the spectral radius of that
linear map is below one.

Modes are stored 0-based with flat index ``N*N*n + N*j0 + j1`` for the
triple ``(j1, n, j0)``, i.e. arrays reshape to ``[n, j0, j1]``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConvergenceError, ErgodicityError, PreconditionError, ValidationError
from .fsmc import BurstStats, ergodicity_check
from .lqr import PlantSpec, _BurstTerms

__all__ = [
    "AugmentedModeIndex",
    "StabilityReport",
    "mode_index",
    "mu_transitions",
    "closed_loop_matrices",
    "second_moment_step",
    "lambda_operator",
    "dense_lambda",
    "spectral_radius_lambda",
    "spectral_radius",
    "mode_steady_state",
    "noise_matrices",
    "steady_state_second_moment",
    "analyze_stability",
    "export_report_csv",
]

DENSE_FALLBACK_LIMIT = 2_048


@dataclass(frozen=True)
class AugmentedModeIndex:
    """Bijection between mode triples and flat indices.

    ``f(v1, v2, v3) = N^2 v2 + N (v3 - 1) + v1`` with ``1 <= v1, v3 <= N``
    and ``0 <= v2 <= L`` maps onto ``1..(L+1) N^2``.
    """

    N: int
    L: int

    def __post_init__(self):
        if self.N < 1 or self.L < 0:
            raise ValidationError(f"need N >= 1 and L >= 0, got N={self.N}, L={self.L}")

    @property
    def size(self) -> int:
        return (self.L + 1) * self.N * self.N

    def f(self, v1: int, v2: int, v3: int) -> int:
        if not (1 <= v1 <= self.N and 1 <= v3 <= self.N and 0 <= v2 <= self.L):
            raise IndexError(f"mode ({v1}, {v2}, {v3}) out of range")
        return self.N * self.N * v2 + self.N * (v3 - 1) + v1

    def inverse(self, index: int) -> tuple[int, int, int]:
        if not 1 <= index <= self.size:
            raise IndexError(f"mode index {index} out of range 1..{self.size}")
        v2, rest = divmod(index - 1, self.N * self.N)
        v3, v1 = divmod(rest, self.N)
        return v1 + 1, v2, v3 + 1

    def flat(self, j1: int, n: int, j0: int) -> int:
        """0-based flat index of the 0-based triple."""
        return self.N * self.N * n + self.N * j0 + j1


def mode_index(N: int, L: int) -> AugmentedModeIndex:
    return AugmentedModeIndex(N, L)


def mu_transitions(stats: BurstStats, index: AugmentedModeIndex | None = None):
    """Mode transition matrix ``mu`` and the mask of unreachable source modes.

    ``mu[(i1,l,i0), (j1,n,j0)] = [e_i0'P1 P0^l e_j0  e_j0'P1 e_i1 / e_i0'P1 P0^l P1 e_i1]
    * e_i1' P0^n P1 e_j1``.  Source modes whose conditioning event has zero
    probability get an all-zero row and are flagged ``True``.
    """
    N, L = stats.n_states, stats.L
    if index is None:
        index = mode_index(N, L)
    P1, powers = stats.P1, stats.P0_powers
    P1P0 = np.einsum("ab,lbc->lac", P1, powers)            # [l, i0, j0]
    den = np.einsum("lac,cd->lad", P1P0, P1)                # [l, i0, i1]
    # bayes[l, i0, i1, j0] = P1P0[l,i0,j0] * P1[j0,i1] / den[l,i0,i1]
    num = P1P0[:, :, np.newaxis, :] * P1.T[np.newaxis, np.newaxis, :, :]
    unreachable = den <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bayes = np.where(unreachable[..., np.newaxis], 0.0, num / den[..., np.newaxis])
    ahead = np.einsum("nab,bc->anc", powers, P1)            # [i1, n, j1]
    # mu6[l, i0, i1, n, j0, j1]
    mu6 = bayes[:, :, :, np.newaxis, :, np.newaxis] * ahead[np.newaxis, np.newaxis, :, :, np.newaxis, :]
    size = index.size
    mu = mu6.reshape(size, size)
    return mu, unreachable.reshape(-1)


def closed_loop_matrices(plant: PlantSpec, gains: np.ndarray, index: AugmentedModeIndex,
                         terms: _BurstTerms | None = None) -> np.ndarray:
    """``L_(j1,n,j0) = A^(n+1) + Psi_(n) K_(j0)`` for every mode, shape ``(size, n_x, n_x)``."""
    K = np.asarray(gains, dtype=np.float64)
    if K.ndim == 2:
        K = K[np.newaxis]
    N, L = index.N, index.L
    if K.shape[0] == 1 and N > 1:
        K = np.broadcast_to(K, (N,) + K.shape[1:])
    if K.shape != (N, plant.n_u, plant.n_x):
        raise ValidationError(f"gains must have shape {(N, plant.n_u, plant.n_x)}, got {K.shape}")
    if terms is None or terms.L < L:
        A_next, Psi = _burst_powers(plant, L)
    else:
        A_next, Psi = terms.A_next[:L + 1], terms.Psi[:L + 1]
    per_n_j0 = A_next[:, np.newaxis] + np.einsum("nab,jbc->njac", Psi, K)   # [n, j0]
    full = np.broadcast_to(per_n_j0[:, :, np.newaxis], (L + 1, N, N, plant.n_x, plant.n_x))
    return np.ascontiguousarray(full).reshape(index.size, plant.n_x, plant.n_x)


def _burst_powers(plant: PlantSpec, L: int):
    n_x, n_u = plant.n_x, plant.n_u
    A_next = np.empty((L + 1, n_x, n_x))
    Psi = np.empty((L + 1, n_x, n_u))
    A_next[0] = plant.A
    Psi[0] = plant.B
    Phi_pow = np.eye(n_u)
    for n in range(1, L + 1):
        A_next[n] = plant.A @ A_next[n - 1]
        Phi_pow = Phi_pow @ plant.Phi
        Psi[n] = plant.A @ Psi[n - 1] + plant.B @ Phi_pow
    return A_next, Psi


@dataclass(eq=False)
class StabilityReport:
    """Closed-loop matrices, mode chain, spectral radius and steady state."""

    index: AugmentedModeIndex
    closed_loop: np.ndarray
    mu: np.ndarray
    unreachable: np.ndarray
    rho: float | None = None
    rho_method: str = ""
    psi: np.ndarray | None = None
    W: np.ndarray | None = field(default=None, repr=False)
    G: np.ndarray | None = field(default=None, repr=False)
    X_e: np.ndarray | None = None
    x_e: np.ndarray | None = None
    truncation_mass: float = 0.0

    @property
    def stable(self) -> bool:
        return self.rho is not None and self.rho < 1.0


def second_moment_step(report: StabilityReport, blocks: np.ndarray, G: np.ndarray | None = None) -> np.ndarray:
    """``M_j <- L_j (sum_i M_i mu_ij) L_j' + G_j`` for every mode ``j``."""
    M = np.asarray(blocks)
    size, n_x = M.shape[0], M.shape[1]
    S = (report.mu.T @ M.reshape(size, -1)).reshape(size, n_x, n_x)
    Lc = report.closed_loop
    out = Lc @ S @ np.transpose(Lc, (0, 2, 1))
    if G is not None:
        out += G
    return out


def lambda_operator(report: StabilityReport):
    """Matrix-free Lambda as a :class:`scipy.sparse.linalg.LinearOperator` on row-major vec2."""
    from scipy.sparse.linalg import LinearOperator

    size, n_x = report.closed_loop.shape[0], report.closed_loop.shape[1]
    dim = size * n_x * n_x

    def matvec(v):
        M = np.asarray(v, dtype=np.float64).reshape(size, n_x, n_x)
        return second_moment_step(report, M).reshape(-1)

    return LinearOperator((dim, dim), matvec=matvec, dtype=np.float64)


def dense_lambda(report: StabilityReport) -> np.ndarray:
    """Explicit Lambda: block ``(j, i)`` equals ``mu_ij (L_j kron L_j)``."""
    Lc = report.closed_loop
    size, n_x = Lc.shape[0], Lc.shape[1]
    n2 = n_x * n_x
    kron = np.einsum("jab,jcd->jacbd", Lc, Lc).reshape(size, n2, n2)
    blocks = report.mu.T[:, :, np.newaxis, np.newaxis] * kron[:, np.newaxis]
    return blocks.transpose(0, 2, 1, 3).reshape(size * n2, size * n2)


def spectral_radius_lambda(report: StabilityReport, tol: float = 1e-12, max_iter: int = 50_000,
                           patience: int = 3, dense_limit: int = DENSE_FALLBACK_LIMIT) -> float:
    """Spectral radius of Lambda by power iteration on the block operator.

    Lambda maps positive semidefinite blocks to positive semidefinite
    blocks, so its dominant eigenvalue is real and equals rho.  Iteration
    starts from identity blocks and stops once the trace growth ratio
    changes by less than ``tol`` (relative) for ``patience`` consecutive
    steps.  The error of the estimate is roughly that change divided by
    ``1 - |lambda_2| / rho``, hence the tight default.  On stagnation a
    dense eigensolve is used for small operators and an Arnoldi solve on
    the matrix-free operator otherwise.
    """
    size, n_x = report.closed_loop.shape[0], report.closed_loop.shape[1]
    M = np.broadcast_to(np.eye(n_x), (size, n_x, n_x)).copy()
    M /= np.trace(M, axis1=1, axis2=2).sum()
    ratio_prev = None
    calm = 0
    for it in range(1, max_iter + 1):
        M_new = second_moment_step(report, M)
        mass = np.trace(M_new, axis1=1, axis2=2).sum()
        if not np.isfinite(mass):
            break
        if mass <= 0:
            # nilpotent on the cone
            report.rho, report.rho_method = 0.0, "power"
            return 0.0
        ratio = float(mass)   # previous iterate has unit trace mass
        M = M_new / mass
        if ratio_prev is not None and abs(ratio - ratio_prev) <= tol * ratio:
            calm += 1
            if calm >= patience:
                report.rho, report.rho_method = ratio, "power"
                return ratio
        else:
            calm = 0
        ratio_prev = ratio
    if size * n_x * n_x <= dense_limit:
        rho = float(np.abs(np.linalg.eigvals(dense_lambda(report))).max())
        report.rho, report.rho_method = rho, "dense"
        return rho
    from scipy.sparse.linalg import ArpackNoConvergence, eigs

    try:
        vals = eigs(lambda_operator(report), k=1, which="LM", return_eigenvectors=False,
                    v0=np.broadcast_to(np.eye(n_x), (size, n_x, n_x)).reshape(-1), maxiter=max_iter)
    except ArpackNoConvergence:
        raise ConvergenceError(f"spectral radius of Lambda did not converge ({max_iter} iterations)") from None
    rho = float(np.abs(vals).max())
    report.rho, report.rho_method = rho, "arnoldi"
    return rho


def _report_core(plant, stats, gains):
    index = mode_index(stats.n_states, stats.L)
    terms = _BurstTerms(plant, stats)
    mu, unreachable = mu_transitions(stats, index)
    Lc = closed_loop_matrices(plant, gains, index, terms)
    row_sums = mu.sum(axis=1)[~unreachable]
    trunc = float(1.0 - row_sums.min()) if row_sums.size else 0.0
    return StabilityReport(index, Lc, mu, unreachable, truncation_mass=trunc), terms


def spectral_radius(plant: PlantSpec, stats: BurstStats, gains: np.ndarray, **kwargs) -> float:
    report, _ = _report_core(plant, stats, gains)
    return spectral_radius_lambda(report, **kwargs)


def mode_steady_state(mu: np.ndarray, unreachable: np.ndarray | None = None, initial=None,
                      tol: float = 1e-15, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of the mode chain restricted to its recurrent class."""
    mu = np.asarray(mu)
    size = mu.shape[0]
    alive = np.ones(size, dtype=bool) if unreachable is None else ~np.asarray(unreachable)
    # modes that receive probability mass from the live modes
    support = alive & (mu[alive].sum(axis=0) > 0)
    check = ergodicity_check(mu, support=support)
    if not check.ergodic:
        raise ErgodicityError(f"mode chain is not ergodic on its reachable class: {check.diagnosis}")
    if initial is None:
        psi = np.where(support, 1.0, 0.0)
    else:
        psi = np.array(initial, dtype=np.float64)
    psi /= psi.sum()
    for _ in range(max_iter):
        nxt = psi @ mu
        nxt /= nxt.sum()
        if np.abs(nxt - psi).sum() < tol:
            return nxt
        psi = nxt
    raise ConvergenceError(f"mode steady state did not converge in {max_iter} iterations")


def noise_matrices(plant: PlantSpec, index: AugmentedModeIndex, terms: _BurstTerms | None = None) -> np.ndarray:
    """``W_(j1,n,j0) = sum_{h=0..n} A^(n-h) Sigma_w A^(n-h)'`` for every mode."""
    if terms is None:
        Apow = np.empty((index.L + 1, plant.n_x, plant.n_x))
        Apow[0] = np.eye(plant.n_x)
        for n in range(1, index.L + 1):
            Apow[n] = plant.A @ Apow[n - 1]
        acc = np.cumsum(Apow @ plant.Sigma_w @ np.transpose(Apow, (0, 2, 1)), axis=0)
    else:
        acc = terms.noise_acc[:index.L + 1]
    N = index.N
    full = np.broadcast_to(acc[:, np.newaxis, np.newaxis], (index.L + 1, N, N) + acc.shape[1:])
    return np.ascontiguousarray(full).reshape(index.size, plant.n_x, plant.n_x)


def steady_state_second_moment(report: StabilityReport, tol: float = 1e-12,
                               max_iter: int = 1_000_000) -> np.ndarray:
    """Steady-state second moment ``X_e = sum_j M_j`` at reception instants.

    Solves ``M_j = L_j (sum_i M_i mu_ij) L_j' + G_j`` by fixed-point
    iteration (``G_j = (sum_i psi_i mu_ij) W_j``).
    """
    if report.rho is None or not report.rho < 1.0:
        raise PreconditionError(f"steady-state second moment requires rho < 1 (rho = {report.rho})")
    if report.G is None:
        raise PreconditionError("noise terms G are not set on this report")
    M = report.G.copy()
    for _ in range(max_iter):
        M_new = second_moment_step(report, M, report.G)
        scale = max(np.abs(M_new).max(), np.finfo(float).tiny)
        done = np.abs(M_new - M).max() <= tol * scale
        M = M_new
        if done:
            break
    else:
        raise ConvergenceError("second-moment fixed point did not converge")
    X_e = M.sum(axis=0)
    X_e = 0.5 * (X_e + X_e.T)
    report.X_e = X_e
    report.x_e = np.zeros(X_e.shape[0])
    report.M_blocks = M
    return X_e


def analyze_stability(plant: PlantSpec, stats: BurstStats, gains: np.ndarray,
                      second_moment: bool = True, **rho_kwargs) -> StabilityReport:
    """Full report: rho, mode steady state, noise terms and (if stable) ``X_e``."""
    report, terms = _report_core(plant, stats, gains)
    spectral_radius_lambda(report, **rho_kwargs)
    report.psi = mode_steady_state(report.mu, report.unreachable)
    report.W = noise_matrices(plant, report.index, terms)
    report.G = (report.psi @ report.mu)[:, np.newaxis, np.newaxis] * report.W
    if second_moment and report.stable:
        steady_state_second_moment(report)
    return report


def export_report_csv(report: StabilityReport, path: str | Path) -> None:
    """Key/value summary rows, followed by ``X_e`` entries when present."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "row", "col", "value"])
        writer.writerow(["rho", "", "", repr(float(report.rho))])
        writer.writerow(["verdict", "", "", "mean-square stable" if report.stable else "not mean-square stable"])
        writer.writerow(["mode_count", "", "", report.index.size])
        writer.writerow(["truncation_mass", "", "", repr(report.truncation_mass)])
        writer.writerow(["unreachable_modes", "", "", int(report.unreachable.sum())])
        if report.X_e is not None:
            for r in range(report.X_e.shape[0]):
                for c in range(report.X_e.shape[1]):
                    writer.writerow(["X_e", r, c, repr(float(report.X_e[r, c]))])
