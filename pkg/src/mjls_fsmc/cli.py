"""Command-line front end.

Subcommands ``synthesize``, ``stability``, ``simulate``, ``sweep-phi`` and
``baseline-bernoulli`` read one JSON experiment config (the bundled
pendulum case study by default) and write CSV/JSON results into
``--out``.  Every file is written to a temporary name and renamed into
place.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 unstable
verdict under ``--require-stable``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import simulator as sim
from .config import ExperimentConfig, bundled_config_path, load_config
from .errors import (
    CapExceededError,
    ConvergenceError,
    ErgodicityError,
    MjlsError,
    PreconditionError,
    SynthesisError,
    ValidationError,
)
from .fsmc import burst_stats, stationary_distribution
from .lqr import (
    bernoulli_baseline,
    export_schedule_csv,
    finite_horizon_cost,
    finite_horizon_lqr,
    gains_to_dict,
    infinite_horizon_lqr,
    load_gains,
    long_run_cost,
    modified_riccati_residual,
    sweep_phi,
)
from .stability import analyze_stability, export_report_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_UNSTABLE = 0, 2, 3, 4


class UsageError(ValidationError):
    pass


# -- output helpers ----------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@contextlib.contextmanager
def _atomic_path(path: Path):
    """Yield a temporary path that is renamed to ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _matrix_rows(array: np.ndarray) -> list[list]:
    """Rows ``(k or index, state_index, row, col, value)`` for a stack ``[k, i, r, c]``."""
    rows = []
    for k in range(array.shape[0]):
        for i in range(array.shape[1]):
            for r in range(array.shape[2]):
                for c in range(array.shape[3]):
                    rows.append([k, i + 1, r, c, repr(float(array[k, i, r, c]))])
    return rows


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# -- argument handling -------------------------------------------------------


def _parse_traces(text: str) -> tuple[int, int]:
    try:
        a, c = text.lower().split("x")
        n_a, n_c = int(a), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NxM (noise x channel traces), got {text!r}") from None
    if n_a < 1 or n_c < 1:
        raise argparse.ArgumentTypeError("trace counts must be >= 1")
    return n_a, n_c


def _parse_seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def parse_grid(text: str) -> list[float]:
    """``"0,0.5,1"`` or ``"start:stop:step"`` (inclusive stop)."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"grid range must be start:stop:step, got {text!r}") from None
        if step <= 0:
            raise UsageError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(max(n, 0))]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"grid entries must be numbers, got {text!r}") from None


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="experiment config (JSON); defaults to the bundled pendulum case")
    parser.add_argument("--phi", type=float, default=None, help="override the scalar compensation factor")
    parser.add_argument("--epsilon", type=float, default=None, help="burst truncation threshold")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mjls-fsmc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="finite- or infinite-horizon gain synthesis")
    _common(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--horizon", type=int, default=None, help="finite horizon in steps")
    mode.add_argument("--infinite", action="store_true", help="stationary gains")

    p = sub.add_parser("stability", help="mean-square stability of a gain set")
    _common(p)
    p.add_argument("--gains", type=Path, default=None, help="gain file; defaults to synthesized stationary gains")
    p.add_argument("--require-stable", action="store_true", help="exit with status 4 unless rho < 1")

    p = sub.add_parser("simulate", help="Monte Carlo over noise x channel traces")
    _common(p)
    p.add_argument("--gains", type=Path, action="append", default=None,
                   help="gain file (repeatable); defaults to synthesized stationary gains")
    p.add_argument("--traces", type=_parse_traces, default=None, help="NxM noise x channel traces")
    p.add_argument("--seed", type=_parse_seed, default=None, help="master seed")
    p.add_argument("--horizon", type=int, default=None, help="simulation length in steps")
    p.add_argument("--exclude-quantile", type=float, default=None,
                   help="also report the mean cost over the cheapest fraction q of traces")
    p.add_argument("--equilibrium", action="store_true", help="start every trace from x0 = 0")
    p.add_argument("--require-stable", action="store_true", help="exit with status 4 if any gain set has rho >= 1")

    p = sub.add_parser("sweep-phi", help="rho and long-run cost over a compensation grid")
    _common(p)
    p.add_argument("--grid", type=str, default="0:1:0.1", help="'a,b,c' or 'start:stop:step'")

    p = sub.add_parser("baseline-bernoulli", help="arrival-probability baseline gain")
    _common(p)
    p.add_argument("--nu", type=float, default=None,
                   help="arrival probability; defaults to the stationary delivery rate of the channel")
    p.add_argument("--require-stable", action="store_true", help="exit with status 4 unless rho < 1")
    return parser


def _load(args) -> ExperimentConfig:
    path = args.config if args.config is not None else bundled_config_path()
    try:
        cfg = load_config(path)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    return cfg


def _plant(args, cfg):
    return cfg.plant if args.phi is None else cfg.plant.with_phi(args.phi)


def _stats(args, cfg):
    eps = cfg.run.epsilon if args.epsilon is None else args.epsilon
    return burst_stats(cfg.channel, epsilon=eps)


def _gain_set(path: Path, cfg) -> np.ndarray:
    try:
        return load_gains(path, cfg.channel.n_states)
    except OSError as exc:
        raise ValidationError(f"cannot read gains {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"gain file {path} is not valid JSON: {exc}") from None


# -- subcommands -------------------------------------------------------------


def cmd_synthesize(args, out) -> int:
    if args.horizon is not None and args.horizon < 1:
        raise UsageError(f"--horizon must be >= 1, got {args.horizon}")
    cfg = _load(args)
    plant, stats = _plant(args, cfg), _stats(args, cfg)
    summary = {"phi": plant.phi.tolist(), "epsilon": stats.epsilon, "L": stats.L}
    if args.infinite:
        sol = infinite_horizon_lqr(plant, stats)
        J = long_run_cost(plant, stats, sol.X)
        summary.update(mode="infinite", J_inf=J, rho=sol.rho, iterations=sol.iterations, warnings=sol.warnings)
        files = {
            "gains.csv": _csv_text(["k", "state_index", "row", "col", "value"], _matrix_rows(sol.K[np.newaxis])),
            "gains.json": _json(gains_to_dict(sol.K, label="proposed", source="infinite-horizon synthesis")),
            "riccati.csv": _csv_text(["k", "state_index", "row", "col", "value"], _matrix_rows(sol.X[np.newaxis])),
        }
        lines = [f"J_inf = {J:.9g}", f"rho = {sol.rho:.6f}"]
    else:
        T = cfg.run.horizon if args.horizon is None else args.horizon
        sched = finite_horizon_lqr(plant, stats, T)
        J_x0 = finite_horizon_cost(sched, plant, cfg.theta_init, plant.x0)
        J_0 = finite_horizon_cost(sched, plant, cfg.theta_init, np.zeros(plant.n_x))
        summary.update(mode="finite", horizon=T, J_T_x0=J_x0, J_T_zero=J_0)
        files = {
            "gains.json": _json(gains_to_dict(sched.K[0], label="proposed", source=f"finite-horizon synthesis, k = 0, T = {T}")),
            "riccati.csv": _csv_text(["k", "state_index", "row", "col", "value"], _matrix_rows(sched.X)),
        }
        lines = [f"J_T(x0) = {J_x0:.9g}", f"J_T(0) = {J_0:.9g}"]
        with _atomic_path(out / "gains.csv") as tmp:
            export_schedule_csv(sched, tmp)
    for name, text in files.items():
        if text is not None:
            _write_atomic(out / name, text)
    _write_atomic(out / "summary.json", _json(summary))
    print("\n".join(lines))
    return EXIT_OK


def cmd_stability(args, out) -> int:
    cfg = _load(args)
    plant, stats = _plant(args, cfg), _stats(args, cfg)
    if args.gains is None:
        K = infinite_horizon_lqr(plant, stats, check_stability=False).K
        source = "synthesized"
    else:
        K = _gain_set(args.gains, cfg)
        source = str(args.gains)
    report = analyze_stability(plant, stats, K)
    verdict = "mean-square stable" if report.stable else "not mean-square stable"
    with _atomic_path(out / "stability.csv") as tmp:
        export_report_csv(report, tmp)
    _write_atomic(out / "stability.json", _json({
        "gains": source, "rho": report.rho, "verdict": verdict, "mode_count": report.index.size,
        "truncation_mass": report.truncation_mass, "unreachable_modes": int(report.unreachable.sum()),
        "X_e": None if report.X_e is None else report.X_e.tolist(),
    }))
    print(f"rho = {report.rho:.6f}")
    print(f"verdict: {verdict}")
    print(f"truncation mass = {report.truncation_mass:.3e}")
    if args.require_stable and not report.stable:
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    cfg = _load(args)
    plant, stats = _plant(args, cfg), _stats(args, cfg)
    n_a, n_c = args.traces or (cfg.run.noise_traces, cfg.run.channel_traces)
    seed = cfg.run.seed if args.seed is None else args.seed
    T = cfg.run.horizon if args.horizon is None else args.horizon
    if T < 1:
        raise UsageError(f"--horizon must be >= 1, got {T}")
    q = args.exclude_quantile
    if q is not None and not 0 < q <= 1:
        raise UsageError(f"--exclude-quantile must lie in (0, 1], got {q}")
    if args.gains:
        sets = [(path.stem, _gain_set(path, cfg)) for path in args.gains]
    else:
        sets = [("proposed", infinite_horizon_lqr(plant, stats, check_stability=False).K)]
    names = [name for name, _ in sets]
    if len(set(names)) != len(names):
        raise UsageError("gain files must have distinct names")
    x0 = np.zeros(plant.n_x) if args.equilibrium else None
    overview, unstable = {}, False
    for name, K in sets:
        config = sim.SimConfig(plant, cfg.channel, K, T, n_a, n_c, seed, cfg.theta_init, x0=x0)
        stats_mc = sim.monte_carlo(config)
        target = out if len(sets) == 1 else out / name
        sim.export_stats(stats_mc, target, q)
        rho = analyze_stability(plant, stats, K, second_moment=False).rho
        unstable |= not rho < 1
        entry = sim.stats_summary(stats_mc, q)
        entry["rho"] = rho
        overview[name] = entry
        line = f"{name}: average cost {entry['average_cost_all']:.9g}"
        if q is not None:
            line += f", over cheapest {q:g}: {entry['average_cost_kept']:.9g}"
        print(line + f", divergent traces {entry['divergent_traces']}")
    if len(sets) > 1:
        _write_atomic(out / "comparison.json", _json(overview))
    if args.require_stable and unstable:
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_sweep_phi(args, out) -> int:
    grid = parse_grid(args.grid)
    if not grid:
        raise UsageError("--grid is empty")
    if any(not 0 <= v <= 1 for v in grid):
        raise UsageError("compensation factors must lie in [0, 1]")
    cfg = _load(args)
    stats = _stats(args, cfg)
    rows = sweep_phi(cfg.plant, stats, grid, workers=min(sim.worker_count(), len(grid)))
    table = [[repr(r.phi), "" if r.rho is None else repr(r.rho), "" if r.J_inf is None else repr(r.J_inf),
              r.error or ""] for r in rows]
    _write_atomic(out / "sweep.csv", _csv_text(["phi", "rho", "J_inf", "error"], table))
    for r in rows:
        if r.error:
            print(f"phi = {r.phi:g}: {r.error}")
        else:
            print(f"phi = {r.phi:g}: rho = {r.rho:.6f}, J_inf = {r.J_inf:.6g}")
    return EXIT_OK if all(r.error is None for r in rows) else EXIT_NUMERIC


def cmd_baseline_bernoulli(args, out) -> int:
    cfg = _load(args)
    plant, stats = _plant(args, cfg), _stats(args, cfg)
    nu = args.nu
    if nu is None:
        nu = float(stationary_distribution(cfg.channel) @ cfg.channel.delta_hat)
    sol = bernoulli_baseline(plant, nu)
    rho = analyze_stability(plant, stats, sol.K[0], second_moment=False).rho
    _write_atomic(out / "gains.json", _json(gains_to_dict(sol.K, label="bernoulli",
                                                          source=f"modified Riccati equation, nu = {nu!r}")))
    _write_atomic(out / "summary.json", _json({
        "nu": nu, "K": sol.K[0].tolist(), "residual": modified_riccati_residual(plant, sol.X[0], nu),
        "rho": rho, "verdict": "mean-square stable" if rho < 1 else "not mean-square stable",
    }))
    print("K = " + np.array2string(sol.K[0, 0], precision=6, floatmode="fixed"))
    print(f"rho = {rho:.6f}")
    if args.require_stable and not rho < 1:
        return EXIT_UNSTABLE
    return EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "sweep-phi": cmd_sweep_phi,
    "baseline-bernoulli": cmd_baseline_bernoulli,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](args, args.out)
    except (ValidationError, ErgodicityError, CapExceededError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, SynthesisError, PreconditionError, MjlsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
