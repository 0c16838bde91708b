"""Burst-aware LQR control over finite-state Markov channels.

Channel statistics (:mod:`.fsmc`), gain synthesis (:mod:`.lqr`),
mean-square stability (:mod:`.stability`) and Monte Carlo simulation
(:mod:`.simulator`) for linear plants whose actuation link drops packets.
"""

from .errors import (
    BaselineUnstabilizableError,
    CapExceededError,
    ConvergenceError,
    DegenerateStateError,
    ErgodicityError,
    MjlsError,
    NotStabilizableError,
    PreconditionError,
    SynthesisError,
    ValidationError,
)
from .fsmc import BurstStats, FsmcModel, burst_stats, ergodicity_check, stationary_distribution
from .lqr import (
    GainSchedule,
    PlantSpec,
    StationaryGains,
    bernoulli_baseline,
    finite_horizon_lqr,
    infinite_horizon_lqr,
    long_run_cost,
    sweep_phi,
)
from .stability import StabilityReport, analyze_stability, spectral_radius
from .simulator import SimConfig, SimStats, SimTrace, empirical_average_cost, monte_carlo, simulate_trace
from .config import ExperimentConfig, load_config, load_pendulum

__version__ = "0.1.0"
