"""Experiment configuration: one TOML file drives every subcommand.

The file is a key-value tree named after the quantities it sets (alpha1,
beta2, s_grid, ...). Coefficients, targets, and the initial state may be
inlined as constants or pulled from CSV files; referenced files are loaded
and dimension-checked at validation time, and a parsed configuration
serializes back to TOML such that re-parsing yields an identical object.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:  # stdlib on 3.11+, the compatible backport below
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

from .carleman import CutoffSchedule
from .dynamics import Coefficients
from .errors import InvalidSpecError, ShapeError
from .mesh import MeshSpec, RegionMasks, build_mesh, index_range_mask, sector_mask
from .noise import build_tree
from .objectives import ObjectiveSpec
from .problem import Problem

__all__ = ["ExperimentConfig", "load_config", "parse_config", "dumps_toml"]

_DEFAULTS = {
    "seed": 0,
    "mesh": {"mode": "interval", "extent": 1.0, "resolution": 17, "angular_resolution": 0},
    "time": {"horizon": 1.0, "steps": 8},
    "coefficients": {"a1": 0.0, "a2": 0.0, "b1": 0.0, "b2": 0.0},
    "objectives": {
        "alpha1": 1.0,
        "beta1": 50.0,
        "alpha2": 1.0,
        "beta2": 50.0,
        "target1": 0.0,
        "target2": 0.0,
    },
    "initial": {"kind": "bump", "amplitude": 1.0, "offset": 0.0},
    "nash": {"rho": 0.5, "tol": 1e-9, "maxit": 400},
    "carleman": {
        "lambda1": 1.0,
        "lambda_grid": [1.0],
        "s_pilot_min": 0.02,
        "s_pilot_max": 2.5,
        "s_pilot_count": 12,
        "s_count": 8,
        "cutoff_t2": 0.25,
        "cutoff_t1": 0.375,
        "t0": 0.5,
        "instances": 10,
        "identity_dts": [1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256],
        "identity_s": 0.5,
        "identity_lambda": 0.8,
    },
    "uniqueness": {"family_size": 8},
    "stability": {"ball_radius": 3.0, "family_size": 20},
    "sweep": {"target": "nash", "parameters": {}},
}


@dataclass
class ExperimentConfig:
    """Validated configuration tree plus loaded external arrays."""

    data: dict
    base_dir: Path

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data

    # -- section accessors ------------------------------------------------

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def mesh_spec(self) -> MeshSpec:
        m = self.data["mesh"]
        return MeshSpec(m["mode"], m["extent"], m["resolution"], m["angular_resolution"])

    def tree(self):
        t = self.data["time"]
        return build_tree(t["steps"], t["horizon"])

    def coefficients(self, geom) -> Coefficients:
        c = self.data["coefficients"]
        steps = self.data["time"]["steps"]
        values = {}
        for name in ("a1", "a2", "b1", "b2"):
            width = geom.n_interior if name.startswith("a") else geom.n_boundary
            values[name] = _resolve_field(c[name], self.base_dir, steps, width, name)
        return Coefficients(**values)

    def masks(self, geom) -> RegionMasks:
        r = self.data["regions"]
        return RegionMasks(**{name: _build_mask(geom, r[name], name) for name in ("g1", "g2", "g1d", "g2d")})

    def objective(self, geom, masks: RegionMasks) -> ObjectiveSpec:
        o = self.data["objectives"]
        steps = self.data["time"]["steps"]
        t1 = _resolve_field(o["target1"], self.base_dir, steps, geom.n_interior, "target1")
        t2 = _resolve_field(o["target2"], self.base_dir, steps, geom.n_interior, "target2")
        return ObjectiveSpec(o["alpha1"], o["beta1"], o["alpha2"], o["beta2"], masks, y1d=t1, y2d=t2)

    def initial_state(self, geom) -> np.ndarray:
        spec = self.data["initial"]
        kind = spec["kind"]
        if kind == "constant":
            return np.full(geom.n_total, float(spec["amplitude"])) + float(spec["offset"])
        if kind == "csv":
            values = _load_csv_field(self.base_dir / spec["csv"], 1, geom.n_total)
            return values[0]
        if kind == "bump":
            return _bump_profile(geom, float(spec["amplitude"])) + float(spec["offset"])
        raise InvalidSpecError(f"unknown initial kind {kind!r}")

    def cutoff(self) -> CutoffSchedule:
        c = self.data["carleman"]
        return CutoffSchedule(c["cutoff_t2"], c["cutoff_t1"], c["t0"], self.data["time"]["horizon"])

    def build_problem(self) -> Problem:
        geom, ops = build_mesh(self.mesh_spec())
        masks = self.masks(geom)
        return Problem(
            geom=geom,
            ops=ops,
            masks=masks,
            tree=self.tree(),
            coeffs=self.coefficients(geom),
            objective=self.objective(geom, masks),
            initial=self.initial_state(geom),
        )

    def to_toml(self) -> str:
        return dumps_toml(self.data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidSpecError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise InvalidSpecError(f"config parse failure: {exc}") from exc
    data = _merge_defaults(raw)
    cfg = ExperimentConfig(data=data, base_dir=Path(base_dir))
    _validate(cfg)
    return cfg


def _merge_defaults(raw: dict) -> dict:
    data = {}
    known = set(_DEFAULTS) | {"regions"}
    for key in raw:
        if key not in known:
            raise InvalidSpecError(f"unknown config section or key {key!r}")
    for key, default in _DEFAULTS.items():
        if isinstance(default, dict):
            section = dict(default)
            user = raw.get(key, {})
            if not isinstance(user, dict):
                raise InvalidSpecError(f"section {key!r} must be a table")
            for sub, val in user.items():
                if sub not in default:
                    raise InvalidSpecError(f"unknown key {key}.{sub}")
                section[sub] = val
            data[key] = section
        else:
            data[key] = raw.get(key, default)
    if "regions" not in raw:
        raise InvalidSpecError("config needs a [regions] section with g1, g2, g1d, g2d")
    data["regions"] = raw["regions"]
    return data


def _validate(cfg: ExperimentConfig) -> None:
    data = cfg.data
    if not isinstance(data["seed"], int):
        raise InvalidSpecError("seed must be an integer")
    t = data["time"]
    if t["steps"] < 1 or t["horizon"] <= 0:
        raise InvalidSpecError(f"time section invalid: steps={t['steps']}, horizon={t['horizon']}")
    for name in ("g1", "g2", "g1d", "g2d"):
        if name not in data["regions"]:
            raise InvalidSpecError(f"regions section is missing {name!r}")
    # cross-validate everything that has load-time invariants
    geom, ops = build_mesh(cfg.mesh_spec())
    masks = cfg.masks(geom)
    cfg.objective(geom, masks)
    cfg.coefficients(geom)
    cfg.initial_state(geom)
    cfg.cutoff()
    n = data["nash"]
    if not 0 < n["rho"] <= 1:
        raise InvalidSpecError(f"nash damping must lie in (0, 1], got {n['rho']}")
    if n["tol"] <= 0 or n["maxit"] < 1:
        raise InvalidSpecError("nash tolerance must be positive and maxit >= 1")
    c = data["carleman"]
    if c["lambda1"] <= 0:
        raise InvalidSpecError("carleman lambda1 must be positive")
    if not c["lambda_grid"]:
        raise InvalidSpecError("carleman lambda grid must be nonempty")
    if c["instances"] < 1:
        raise InvalidSpecError("carleman instance count must be >= 1")
    horizon = t["horizon"]
    for dt in c["identity_dts"]:
        if dt <= 0 or abs(round(horizon / dt) * dt - horizon) > 1e-9 * horizon:
            raise InvalidSpecError(f"identity step {dt} does not divide the horizon")
    if data["stability"]["ball_radius"] <= 0:
        raise InvalidSpecError("stability ball radius must be positive")
    sweep = data["sweep"]
    if sweep["target"] not in (
        "forward", "nash", "carleman-forward", "carleman-backward",
        "identity", "interpolate", "uniqueness", "stability",
    ):
        raise InvalidSpecError(f"sweep target {sweep['target']!r} is not a subcommand")
    for dotted, values in sweep["parameters"].items():
        if not isinstance(values, list) or not values:
            raise InvalidSpecError(f"sweep parameter {dotted!r} needs a nonempty list")
        _locate(data, dotted)  # raises if the dotted path is unknown


def _locate(data: dict, dotted: str):
    node = data
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise InvalidSpecError(f"sweep parameter path {dotted!r} not found")
        node = node[p]
    if parts[-1] not in node:
        raise InvalidSpecError(f"sweep parameter path {dotted!r} not found")
    return node, parts[-1]


def _build_mask(geom, spec: dict, name: str) -> np.ndarray:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InvalidSpecError(f"region {name} needs a table with a 'kind'")
    if spec["kind"] == "indices":
        return index_range_mask(geom, int(spec["start"]), int(spec["stop"]))
    if spec["kind"] == "sector":
        return sector_mask(
            geom,
            float(spec["theta0"]),
            float(spec["theta1"]),
            float(spec.get("r0", 0.0)),
            float(spec.get("r1", np.inf)),
        )
    raise InvalidSpecError(f"region {name} has unknown kind {spec['kind']!r}")


def _resolve_field(value, base_dir: Path, steps: int, width: int, name: str):
    """Constant, or {csv = path} reference to (time, location, value) rows."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, dict) and "csv" in value:
        return _load_csv_field(base_dir / value["csv"], steps, width)
    raise InvalidSpecError(f"field {name} must be a number or a {{csv = ...}} table")


def _load_csv_field(path: Path, steps: int, width: int) -> np.ndarray:
    if not path.exists():
        raise InvalidSpecError(f"referenced CSV {path} does not exist")
    out = np.zeros((steps, width))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidSpecError(f"CSV {path} is empty")
        for row in reader:
            if not row:
                continue
            try:
                k, j, v = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise InvalidSpecError(f"CSV {path}: bad row {row!r}") from exc
            if not (0 <= k < steps and 0 <= j < width):
                raise ShapeError(
                    f"CSV {path}: index ({k}, {j}) outside ({steps}, {width})"
                )
            out[k, j] = v
    return out


def _bump_profile(geom, amplitude: float) -> np.ndarray:
    """Smooth positive bump vanishing on the boundary slots."""
    out = np.zeros(geom.n_total)
    if geom.mode == "interval":
        length = geom.boundary_coords.max()
        x = geom.interior_coords[:, 0]
        out[: geom.n_interior] = amplitude * np.sin(np.pi * x / length)
    else:
        radius = np.hypot(*geom.boundary_coords[0])
        r = np.hypot(geom.interior_coords[:, 0], geom.interior_coords[:, 1])
        out[: geom.n_interior] = amplitude * (1.0 - (r / radius) ** 2)
    return out


# ----------------------------------------------------------------------
# minimal TOML emitter for the restricted schema used here


def dumps_toml(data: dict) -> str:
    """Serialize a config tree deterministically (sorted keys).

    Covers the value types this schema uses: numbers, booleans, strings,
    lists of numbers, and nested tables.
    """
    lines = []
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    for key in sorted(scalars):
        lines.append(f"{key} = {_fmt_value(scalars[key])}")
    for key in sorted(tables):
        _emit_table(lines, key, tables[key])
    return "\n".join(lines) + "\n"


def _emit_table(lines: list, prefix: str, table: dict) -> None:
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars or not subtables:
        lines.append("")
        lines.append(f"[{prefix}]")
        for key in sorted(scalars):
            lines.append(f"{key} = {_fmt_value(scalars[key])}")
    for key in sorted(subtables):
        _emit_table(lines, f"{prefix}.{key}", subtables[key])


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt_value(v) for v in value) + "]"
    raise InvalidSpecError(f"cannot serialize config value {value!r}")
