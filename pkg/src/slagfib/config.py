"""Run configurations: strict JSON schema, defaults, and object builders."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .flat_model import GroupAction
from .lattice import Lattice


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
    "n": {"type": "integer", "minimum": 1, "maximum": 3},
    "lattice": _obj({
        "type": {"enum": ["cubic", "hexagonal", "basis"]},
        "scale": _pos,
        "basis": {"type": "array", "items": {"type": "array", "items": _num}},
    }, ["type"]),
    "r": _pos,
    "epsilon": {"type": "number", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "cutoff": {"type": "integer", "minimum": 1, "maximum": 64},
    "poly_degree": {"type": "integer", "minimum": 0, "maximum": 8},
    "potential_cutoff": {"type": "integer", "minimum": 0, "maximum": 16},
    "decay": _pos,
    "scale": _pos,
    "phase": _num,
    "group": {"enum": ["trivial", "flip"]},
    "grid": _obj({"count": {"type": "integer", "minimum": 1, "maximum": 101}, "half_width": _pos}),
    "certificate": _obj({
        "delta": _pos, "delta0": _pos, "radius": _pos,
        "samples": {"type": "integer", "minimum": 1}, "sigma_samples": {"type": "integer", "minimum": 1},
        "probes": {"type": "integer", "minimum": 1, "maximum": 4096},
    }),
    "solver": _obj({
        "mode": {"enum": ["fixed_slope", "newton"]},
        "tol": _pos,
        "max_iter": {"type": "integer", "minimum": 1},
        "y": {"type": "array", "items": _num},
    }),
    "tolerances": _obj({"residual": _pos, "comparison": _pos, "equivariance": _pos, "jacobian": _pos}),
    "verify": _obj({
        "radius_fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                             "minItems": 1},
        "fibers": {"type": "integer", "minimum": 1},
        "collapsing_scales": {"type": "array", "items": _pos, "minItems": 2},
        "mc_samples": {"type": "integer", "minimum": 1000},
        "bishop_gromov_radii": {"type": "integer", "minimum": 2},
    }),
}, ["n", "epsilon", "seed"])


DEFAULTS = {
    "name": "run",
    "lattice": {"type": "cubic", "scale": 2.0 * math.pi},
    "r": 1.0,
    "cutoff": 8,
    "poly_degree": 3,
    "potential_cutoff": 3,
    "decay": 4.0,
    "scale": 1.0,
    "phase": 0.0,
    "group": "trivial",
    "grid": {"count": 9, "half_width": 1.0},
    "certificate": {"delta": 0.2, "delta0": 0.4, "samples": 9, "sigma_samples": 3, "probes": 64},
    "solver": {"mode": "fixed_slope", "tol": 1e-10, "max_iter": 200},
    "tolerances": {"residual": 1e-8, "comparison": 1e-6, "equivariance": 1e-9, "jacobian": 0.9},
    "verify": {"radius_fractions": [0.2, 0.4, 0.6, 0.8, 1.0], "fibers": 5,
               "collapsing_scales": [1.0, 0.5, 0.25, 0.125], "mc_samples": 1000000, "bishop_gromov_radii": 10},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def n(self) -> int:
        return int(self.data["n"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def lattice(self) -> Lattice:
        spec = self.data["lattice"]
        kind = spec["type"]
        s = float(spec.get("scale", 1.0))
        if kind == "cubic":
            return Lattice.cubic(self.n, s)
        if kind == "hexagonal":
            if self.n != 2:
                raise ConfigError("lattice.type: hexagonal lattices need n = 2")
            return Lattice.hexagonal(s)
        return Lattice(s * np.array(spec["basis"], dtype=float))

    def action(self, lattice: Lattice) -> GroupAction | None:
        return GroupAction.flip(lattice) if self.data["group"] == "flip" else None

    def with_seed(self, seed: int) -> "RunConfig":
        data = copy.deepcopy(self.data)
        data["seed"] = int(seed)
        return RunConfig(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def parse_config(raw: dict) -> RunConfig:
    """Validate against the strict schema (unknown keys are errors) and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    data = _merge(DEFAULTS, raw)
    if data["lattice"]["type"] == "basis":
        basis = data["lattice"].get("basis")
        if basis is None:
            raise ConfigError("lattice.basis: required when lattice.type is 'basis'")
        b = np.array(basis, dtype=float)
        if b.shape != (data["n"], data["n"]):
            raise ConfigError(f"lattice.basis: expected a {data['n']}x{data['n']} matrix, got shape {b.shape}")
    cert = data["certificate"]
    if cert["delta"] >= cert["delta0"]:
        raise ConfigError("certificate.delta: must be smaller than certificate.delta0")
    y = data["solver"].get("y")
    if y is not None and len(y) != data["n"]:
        raise ConfigError(f"solver.y: expected {data['n']} coordinates")
    scales = data["verify"]["collapsing_scales"]
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ConfigError("verify.collapsing_scales: must be strictly decreasing")
    cfg = RunConfig(data)
    try:
        cfg.lattice()
    except ValueError as exc:
        raise ConfigError(f"lattice: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw)


def config_path_stem(cfg: RunConfig, out: Path) -> Path:
    return Path(out) / cfg["name"]
