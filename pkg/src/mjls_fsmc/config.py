"""Experiment configuration documents (JSON with explicit array shapes).

Every matrix is written as ``{"shape": [rows, cols], "data": [...]}``
with row-major data, so a transposed or mis-sized entry is rejected
instead of being silently reinterpreted.  Nested lists are also accepted
where their dimensionality matches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fsmc import DEFAULT_EPSILON, FsmcModel
from .lqr import PlantSpec, gains_from_dict, gains_to_dict

__all__ = [
    "parse_array",
    "array_doc",
    "RunSettings",
    "ExperimentConfig",
    "load_config",
    "bundled_config_path",
    "bundled_gains_path",
    "load_pendulum",
]


def parse_array(value, name: str, ndim: int | None = None) -> np.ndarray:
    """Array from a ``{shape, data}`` document or nested lists."""
    if isinstance(value, dict):
        if set(value) - {"shape", "data"} or "shape" not in value or "data" not in value:
            raise ValidationError(f"{name}: array documents need exactly the keys 'shape' and 'data'")
        shape = tuple(int(s) for s in value["shape"])
        data = np.asarray(value["data"], dtype=np.float64)
        if data.ndim != 1:
            raise ValidationError(f"{name}: 'data' must be a flat list")
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(f"{name}: declared shape {list(shape)} needs {int(np.prod(shape))} "
                                  f"entries, got {data.size}")
        arr = data.reshape(shape)
    else:
        try:
            arr = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError):
            raise ValidationError(f"{name}: not a rectangular numeric array") from None
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected a {ndim}-d array, got shape {list(arr.shape)}")
    return arr


def array_doc(arr) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


@dataclass(frozen=True)
class RunSettings:
    horizon: int = 720
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    noise_traces: int = 50
    channel_traces: int = 200
    theta_init: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValidationError(f"horizon must be >= 1, got {self.horizon}")
        if not 0 < self.epsilon < 1:
            raise ValidationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if int(self.noise_traces) < 1 or int(self.channel_traces) < 1:
            raise ValidationError("trace counts must be >= 1")
        if self.theta_init is not None:
            t = np.asarray(self.theta_init, dtype=np.float64)
            if t.ndim != 1 or np.any(t < 0) or abs(t.sum() - 1) > 1e-12:
                raise ValidationError("theta_init must be a probability vector")
            object.__setattr__(self, "theta_init", tuple(float(v) for v in t))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Plant, channel, run settings and optional imported gain sets."""

    plant: PlantSpec
    channel: FsmcModel
    run: RunSettings = field(default_factory=RunSettings)
    imported_gains: dict = field(default_factory=dict)
    gain_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.channel.n_states
        if self.run.theta_init is not None and len(self.run.theta_init) != N:
            raise ValidationError(f"theta_init has {len(self.run.theta_init)} entries, channel has {N} states")
        for name, K in self.imported_gains.items():
            if K.shape != (N, self.plant.n_u, self.plant.n_x):
                raise ValidationError(f"imported gains '{name}' have shape {K.shape}, "
                                      f"expected {(N, self.plant.n_u, self.plant.n_x)}")

    @property
    def theta_init(self) -> np.ndarray:
        N = self.channel.n_states
        if self.run.theta_init is None:
            return np.full(N, 1.0 / N)
        return np.array(self.run.theta_init)

    def to_dict(self) -> dict:
        p = self.plant
        doc = {
            "plant": {
                "A": array_doc(p.A),
                "B": array_doc(p.B),
                "Sigma_w": array_doc(p.Sigma_w),
                "Q": array_doc(p.Q),
                "R": array_doc(p.R),
                "Phi": array_doc(p.phi),
                "x0": array_doc(p.x0),
            },
            "channel": self.channel.to_dict(),
            "run": {
                "horizon": int(self.run.horizon),
                "epsilon": float(self.run.epsilon),
                "seed": int(self.run.seed),
                "noise_traces": int(self.run.noise_traces),
                "channel_traces": int(self.run.channel_traces),
                "theta_init": None if self.run.theta_init is None else list(self.run.theta_init),
            },
        }
        if self.imported_gains:
            doc["imported_gains"] = {
                name: gains_to_dict(K, label=self.gain_labels.get(name, ""))
                for name, K in self.imported_gains.items()
            }
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        for section in ("plant", "channel"):
            if section not in doc:
                raise ValidationError(f"config is missing the '{section}' section")
        pd = doc["plant"]
        missing = {"A", "B", "Sigma_w", "Q", "R", "Phi"} - set(pd)
        if missing:
            raise ValidationError(f"plant section is missing {sorted(missing)}")
        plant = PlantSpec(
            A=parse_array(pd["A"], "plant.A", ndim=2),
            B=parse_array(pd["B"], "plant.B", ndim=2),
            Sigma_w=parse_array(pd["Sigma_w"], "plant.Sigma_w", ndim=2),
            Q=parse_array(pd["Q"], "plant.Q", ndim=2),
            R=parse_array(pd["R"], "plant.R", ndim=2),
            Phi=parse_array(pd["Phi"], "plant.Phi", ndim=1),
            x0=None if pd.get("x0") is None else parse_array(pd["x0"], "plant.x0", ndim=1),
        )
        channel = FsmcModel.from_dict(doc["channel"])
        rd = dict(doc.get("run") or {})
        unknown = set(rd) - set(RunSettings.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown run settings {sorted(unknown)}")
        run = RunSettings(**rd)
        gains, labels = {}, {}
        for name, gdoc in (doc.get("imported_gains") or {}).items():
            gains[name] = gains_from_dict(gdoc, channel.n_states)
            labels[name] = gdoc.get("label", "")
        return cls(plant, channel, run, gains, labels)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return (self.plant == other.plant and self.channel == other.channel and self.run == other.run
                and self.imported_gains.keys() == other.imported_gains.keys()
                and all(np.array_equal(self.imported_gains[k], other.imported_gains[k])
                        for k in self.imported_gains))


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.loads(Path(path).read_text())


def bundled_config_path() -> Path:
    return Path(str(resources.files("mjls_fsmc") / "data" / "pendulum.json"))


def bundled_gains_path(name: str) -> Path:
    """Path of a bundled gain fixture: ``"K_B"``, ``"K_M"`` or ``"K_P"``."""
    return Path(str(resources.files("mjls_fsmc") / "data" / f"{name}.json"))


def load_pendulum() -> ExperimentConfig:
    """The bundled inverted-pendulum case study."""
    return load_config(bundled_config_path())
