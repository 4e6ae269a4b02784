"""Scenario configuration, bridge JSON, CSV export and atomic file writes.

Scenario files are YAML with a required integer ``version``. Unknown keys
are rejected at every level and all values are validated by constructing the
corresponding library objects.

Bridge JSON stores every array row-major with full double precision so that
``dump(load(text)) == text``. CSV and printed summaries use 9 significant
digits.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ValidationError
from .gauss_markov import GaussianMarginal, GaussMarkovBridge, LinearPrior, TimeGrid
from .schrodinger_grid import SpatialGrid

__all__ = [
    "SCENARIO_VERSION",
    "BRIDGE_FORMAT",
    "Scenario",
    "atomic_write",
    "fmt",
    "bridge_to_json",
    "bridge_from_json",
    "write_csv",
]

SCENARIO_VERSION = 1
BRIDGE_FORMAT = "bridgekit.gauss-markov-bridge"
BRIDGE_FORMAT_VERSION = 1
SIGNIFICANT_DIGITS = 9


def fmt(value):
    """Format a number with 9 significant digits."""
    return f"{float(value):.{SIGNIFICANT_DIGITS}g}"


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    """Write numeric ``rows`` under ``header``; numbers use 9 significant digits."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in row))
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# scenario


def _section(mapping, name, allowed, required=()):
    if not isinstance(mapping, dict):
        raise ValidationError(f"{name}: expected a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ValidationError(f"{name}: unknown keys {unknown}")
    missing = [k for k in required if k not in mapping]
    if missing:
        raise ValidationError(f"{name}: missing keys {missing}")
    return mapping


def _number(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{name}: expected a number, got {value!r}")
    return float(value)


def _integer(value, name):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{name}: expected an integer, got {value!r}")
    return value


def _array(value, name):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: expected numbers") from exc
    if arr.dtype == object or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: expected finite numbers")
    return arr


def _listify(arr):
    return np.asarray(arr, dtype=float).tolist()


@dataclass
class Scenario:
    """Validated scenario: prior, marginals, time grid and optional blocks."""

    prior: LinearPrior
    initial: GaussianMarginal
    final: GaussianMarginal
    time: TimeGrid
    space: SpatialGrid | None = None
    grid_options: dict = field(default_factory=lambda: {"slices": 21, "tol": 1e-8, "max_iter": 10_000})
    simulation: dict = field(default_factory=lambda: {"paths": 10_000, "seed": 0, "dt": None, "export_paths": 10})
    output: dict = field(default_factory=lambda: {"directory": ".", "formats": ["json", "csv"]})

    @classmethod
    def from_mapping(cls, data):
        data = _section(
            data, "scenario", ("version", "prior", "marginals", "time", "space", "simulation", "output"),
            required=("version", "prior", "marginals"),
        )
        version = _integer(data["version"], "version")
        if version != SCENARIO_VERSION:
            raise ValidationError(f"unsupported scenario version {version} (expected {SCENARIO_VERSION})")

        p = _section(data["prior"], "prior", ("drift", "epsilon", "breakpoints"), required=("drift",))
        bps = p.get("breakpoints")
        prior = LinearPrior(
            _array(p["drift"], "prior.drift"),
            _number(p.get("epsilon", 0.0), "prior.epsilon"),
            None if bps is None else tuple(_array(bps, "prior.breakpoints")),
        )

        m = _section(data["marginals"], "marginals", ("initial", "final"), required=("initial", "final"))
        laws = []
        for key in ("initial", "final"):
            g = _section(m[key], f"marginals.{key}", ("mean", "covariance"), required=("mean", "covariance"))
            law = GaussianMarginal(_array(g["mean"], f"{key}.mean"), _array(g["covariance"], f"{key}.covariance"))
            if law.dimension != prior.dimension:
                raise ValidationError(f"marginals.{key}: dimension {law.dimension} != prior dimension {prior.dimension}")
            laws.append(law)

        t = _section(data.get("time", {}), "time", ("start", "end", "steps"))
        start = _number(t.get("start", 0.0), "time.start")
        end = _number(t.get("end", 1.0), "time.end")
        if "steps" in t:
            grid = TimeGrid(start, end, _integer(t["steps"], "time.steps"))
        else:
            grid = TimeGrid.default(start, end)
        prior.check_aligned(grid)

        out = cls(prior, laws[0], laws[1], grid)
        if data.get("space") is not None:
            s = _section(
                data["space"], "space", ("lower", "upper", "points", "slices", "tol", "max_iter"),
                required=("lower", "upper", "points"),
            )
            out.space = SpatialGrid(
                tuple(_array(s["lower"], "space.lower").ravel()),
                tuple(_array(s["upper"], "space.upper").ravel()),
                tuple(_integer(v, "space.points") for v in np.atleast_1d(s["points"]).tolist()),
            )
            if out.space.dimension != prior.dimension:
                raise ValidationError("space: dimension does not match the prior")
            out.grid_options = {
                "slices": _integer(s.get("slices", 21), "space.slices"),
                "tol": _number(s.get("tol", 1e-8), "space.tol"),
                "max_iter": _integer(s.get("max_iter", 10_000), "space.max_iter"),
            }
            if out.grid_options["slices"] < 2 or out.grid_options["tol"] <= 0 or out.grid_options["max_iter"] < 1:
                raise ValidationError("space: slices >= 2, tol > 0 and max_iter >= 1 are required")
        if data.get("simulation") is not None:
            s = _section(data["simulation"], "simulation", ("paths", "seed", "dt", "export_paths"))
            sim = dict(out.simulation)
            if "paths" in s:
                sim["paths"] = _integer(s["paths"], "simulation.paths")
            if "seed" in s:
                sim["seed"] = _integer(s["seed"], "simulation.seed")
            if s.get("dt") is not None:
                sim["dt"] = _number(s["dt"], "simulation.dt")
            if "export_paths" in s:
                sim["export_paths"] = _integer(s["export_paths"], "simulation.export_paths")
            if sim["paths"] < 1 or not 0 <= sim["seed"] < 2**64 or sim["export_paths"] < 0:
                raise ValidationError("simulation: paths >= 1, 0 <= seed < 2**64 and export_paths >= 0 are required")
            if sim["dt"] is not None and not sim["dt"] > 0:
                raise ValidationError("simulation.dt must be positive")
            out.simulation = sim
        if data.get("output") is not None:
            o = _section(data["output"], "output", ("directory", "formats"))
            formats = list(o.get("formats", ["json", "csv"]))
            bad = sorted(set(formats) - {"json", "csv"})
            if bad:
                raise ValidationError(f"output.formats: unsupported {bad}")
            out.output = {"directory": str(o.get("directory", ".")), "formats": formats}
        return out

    def to_mapping(self):
        prior = {"drift": _listify(self.prior.drift), "epsilon": self.prior.epsilon}
        if self.prior.breakpoints is not None:
            prior["breakpoints"] = list(self.prior.breakpoints)
        data = {
            "version": SCENARIO_VERSION,
            "prior": prior,
            "marginals": {
                key: {"mean": _listify(law.mean), "covariance": _listify(law.covariance)}
                for key, law in (("initial", self.initial), ("final", self.final))
            },
            "time": {"start": self.time.t_start, "end": self.time.t_end, "steps": self.time.steps},
        }
        if self.space is not None:
            data["space"] = {
                "lower": list(self.space.lower),
                "upper": list(self.space.upper),
                "points": list(self.space.points),
                **self.grid_options,
            }
        data["simulation"] = dict(self.simulation)
        data["output"] = dict(self.output)
        return data

    @classmethod
    def loads(cls, text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError(f"scenario is not valid YAML: {exc}") from exc
        return cls.from_mapping(data)

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def dumps(self):
        return yaml.safe_dump(self.to_mapping(), sort_keys=False, default_flow_style=None)

    def with_epsilon(self, epsilon):
        out = Scenario(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.prior = self.prior.with_epsilon(epsilon)
        return out


# ---------------------------------------------------------------------------
# bridge JSON


def bridge_to_json(bridge):
    """Serialize a :class:`GaussMarkovBridge`; output is deterministic."""
    prior = {"drift": _listify(bridge.prior.drift), "epsilon": bridge.prior.epsilon}
    prior["breakpoints"] = None if bridge.prior.breakpoints is None else list(bridge.prior.breakpoints)
    doc = {
        "format": BRIDGE_FORMAT,
        "format_version": BRIDGE_FORMAT_VERSION,
        "dimension": bridge.dimension,
        "epsilon": bridge.epsilon,
        "times": {"start": bridge.grid.t_start, "end": bridge.grid.t_end, "steps": bridge.grid.steps},
        "prior": prior,
        "initial": {"mean": _listify(bridge.initial.mean), "covariance": _listify(bridge.initial.covariance)},
        "final": {"mean": _listify(bridge.final.mean), "covariance": _listify(bridge.final.covariance)},
        "tolerances": {k: bridge.tolerances[k] for k in sorted(bridge.tolerances)},
        "diagnostics": {k: bridge.diagnostics[k] for k in sorted(bridge.diagnostics)},
        "pi": _listify(bridge.pi),
        "mean_drift": _listify(bridge.mean_drift),
        "mean": _listify(bridge.mean),
        "covariance": _listify(bridge.covariance),
    }
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def bridge_from_json(text):
    """Inverse of :func:`bridge_to_json`; shapes and symmetry are re-checked."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bridge file is not valid JSON: {exc}") from exc
    keys = (
        "format", "format_version", "dimension", "epsilon", "times", "prior", "initial", "final",
        "tolerances", "diagnostics", "pi", "mean_drift", "mean", "covariance",
    )
    doc = _section(doc, "bridge", keys, required=keys)
    if doc["format"] != BRIDGE_FORMAT or doc["format_version"] != BRIDGE_FORMAT_VERSION:
        raise ValidationError(f"unsupported bridge format {doc['format']!r} v{doc['format_version']}")
    t = _section(doc["times"], "times", ("start", "end", "steps"), required=("start", "end", "steps"))
    grid = TimeGrid(_number(t["start"], "times.start"), _number(t["end"], "times.end"), _integer(t["steps"], "times.steps"))
    p = _section(doc["prior"], "prior", ("drift", "epsilon", "breakpoints"), required=("drift", "epsilon", "breakpoints"))
    bps = p["breakpoints"]
    prior = LinearPrior(_array(p["drift"], "prior.drift"), _number(p["epsilon"], "prior.epsilon"),
                        None if bps is None else tuple(bps))
    n = _integer(doc["dimension"], "dimension")
    if n != prior.dimension:
        raise ValidationError("dimension does not match the prior")
    laws = [GaussianMarginal(_array(doc[k]["mean"], f"{k}.mean"), _array(doc[k]["covariance"], f"{k}.covariance"))
            for k in ("initial", "final")]
    nodes = grid.steps + 1
    arrays = {}
    for key, shape in (("pi", (nodes, n, n)), ("mean_drift", (nodes, n)), ("mean", (nodes, n)), ("covariance", (nodes, n, n))):
        arr = _array(doc[key], key)
        if arr.shape != shape:
            raise ValidationError(f"{key}: shape {arr.shape} != {shape}")
        arrays[key] = arr
    for key in ("pi", "covariance"):
        if np.max(np.abs(arrays[key] - np.swapaxes(arrays[key], 1, 2))) > 1e-9 * max(1.0, np.max(np.abs(arrays[key]))):
            raise ValidationError(f"{key}: matrices are not symmetric")
    if _number(doc["epsilon"], "epsilon") != prior.epsilon:
        raise ValidationError("epsilon does not match the prior")
    return GaussMarkovBridge(
        prior=prior, grid=grid, epsilon=prior.epsilon, initial=laws[0], final=laws[1],
        tolerances=dict(doc["tolerances"]), diagnostics=dict(doc["diagnostics"]), **arrays,
    )
