"""Experiment configuration: JSON schema, defaults and semantic validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import families
from .tree import DEFAULT_NODE_CAP, DESIGNS, branching_of, node_count

STUDIES = ("bsde-convergence", "picard-diagnostics", "hedging-convergence",
           "attainability-check", "invariant-suite")
BETA_STUDIES = ("bsde-convergence", "picard-diagnostics")
BETA_MESSAGE = "beta must be > 3 (existence, uniqueness and the contraction estimate need beta > 3)"

_FAMILY = {
    "type": "object",
    "required": ["family"],
    "properties": {"family": {"type": "string"}, "params": {"type": "object"}},
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "required": ["study", "kernel", "clock", "factors", "maturities", "claim"],
    "additionalProperties": False,
    "properties": {
        "study": {"enum": list(STUDIES)},
        "name": {"type": "string"},
        "kernel": _FAMILY,
        "clock": {
            "oneOf": [
                {"type": "object", "required": ["increments"], "additionalProperties": False,
                 "properties": {"increments": {"type": "array", "minItems": 1,
                                               "items": {"type": "number",
                                                         "exclusiveMinimum": 0}}}},
                {"type": "object", "required": ["delta", "steps"], "additionalProperties": False,
                 "properties": {"delta": {"type": "number", "exclusiveMinimum": 0},
                                "steps": {"type": "integer", "minimum": 1}}},
            ]
        },
        "factors": {"type": "integer", "minimum": 1},
        "design": {"enum": list(DESIGNS) + ["orthogonal-array"]},
        "tstar": {"type": "number", "exclusiveMinimum": 0},
        "maturities": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "driver": _FAMILY,
        "market": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambda": _FAMILY,
                           "initial_rate": {"type": ["number", "null"]},
                           "mvt_cap": {"type": "number", "exclusiveMinimum": 0}},
        },
        "claim": _FAMILY,
        "beta": {"type": "number", "exclusiveMinimum": 3},
        "n_values": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "picard": {
            "type": "object", "additionalProperties": False,
            "properties": {"max_iters": {"type": "integer", "minimum": 1},
                           "tol": {"type": "number", "minimum": 0}},
        },
        "expect_attainable": {"type": "boolean"},
        "export_strategies": {"type": "boolean"},
        "cap": {"type": "integer", "minimum": 1},
        "threads": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "design": "full-binary",
    "tstar": 10.0,
    "driver": {"family": "zero", "params": {}},
    "market": {"lambda": {"family": "zero", "params": {}}, "initial_rate": None,
               "mvt_cap": 1e6},
    "picard": {"max_iters": 200, "tol": 1e-13},
    "export_strategies": False,
    "cap": DEFAULT_NODE_CAP,
    "threads": 1,
}


class ConfigError(ValueError):
    """Schema or semantic violation; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass
class ExperimentConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def increments(self) -> list[float]:
        clock = self.data["clock"]
        if "increments" in clock:
            return [float(v) for v in clock["increments"]]
        return [float(clock["delta"])] * int(clock["steps"])

    @property
    def steps(self) -> int:
        return len(self.increments)

    @property
    def maturities(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.data["maturities"])

    @property
    def n_values(self) -> list[int]:
        return list(self.data.get("n_values") or range(1, len(self.maturities) + 1))

    @property
    def design(self) -> str:
        return "simplex" if self.data["design"] == "orthogonal-array" else self.data["design"]

    def node_count(self) -> int:
        return node_count(self.steps, branching_of(self.data["factors"], self.design))

    def echo(self) -> dict:
        return copy.deepcopy(self.data)


def _path(error: jsonschema.ValidationError) -> str:
    parts = ["$"] + [f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path]
    return "".join(parts)


def _schema_message(error: jsonschema.ValidationError) -> str:
    if list(error.absolute_path) == ["beta"]:
        return BETA_MESSAGE
    return error.message


def validate(data: dict, cap: int | None = None) -> ExperimentConfig:
    """Check a raw config and fill in defaults.

    ``cap`` overrides the config's node cap; the node count itself is checked
    separately by the harness so that it can report a resource error.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        raise ConfigError(_path(errors[0]), _schema_message(errors[0]))
    cfg = copy.deepcopy(data)
    for key, value in DEFAULTS.items():
        if key not in cfg:
            cfg[key] = copy.deepcopy(value)
        elif isinstance(value, dict):
            merged = copy.deepcopy(value)
            merged.update(cfg[key])
            cfg[key] = merged
    if cap is not None:
        cfg["cap"] = int(cap)
    conf = ExperimentConfig(cfg)

    if cfg["study"] in BETA_STUDIES and "beta" not in cfg:
        raise ConfigError("$.beta", BETA_MESSAGE + "; it is required for this study")
    pts = conf.maturities
    for i, x in enumerate(pts):
        if not 0.0 <= x <= cfg["tstar"]:
            raise ConfigError(f"$.maturities[{i}]", f"maturity {x} outside [0, {cfg['tstar']}]")
    if len(set(pts)) != len(pts):
        raise ConfigError("$.maturities", "maturities must be pairwise distinct")
    for n in conf.n_values:
        if n > len(pts):
            raise ConfigError("$.n_values", f"n = {n} exceeds the number of maturities "
                                            f"({len(pts)})")
    for key, kind in (("kernel", "kernel"), ("driver", "driver"), ("claim", "claim")):
        _check_family(f"$.{key}", kind, cfg[key])
    _check_family("$.market.lambda", "lambda", cfg["market"]["lambda"])
    lam = cfg["market"]["lambda"].get("params", {})
    if "point" in lam and not 0.0 <= float(lam["point"]) <= cfg["tstar"]:
        raise ConfigError("$.market.lambda.params.point", "lambda point outside [0, tstar]")
    try:
        kernel = families.build("kernel", cfg["kernel"]["family"], cfg["kernel"].get("params"))
    except (TypeError, ValueError, KeyError, ArithmeticError) as exc:
        raise ConfigError("$.kernel.params", str(exc)) from None
    except Exception as exc:  # e.g. LinAlgError for a singular anchor Gram matrix
        raise ConfigError("$.kernel.params", f"{type(exc).__name__}: {exc}") from None
    if kernel.rank > cfg["factors"]:
        raise ConfigError("$.factors", f"kernel rank {kernel.rank} exceeds the factor count "
                                       f"{cfg['factors']}")
    return conf


def _check_family(path: str, kind: str, spec: dict) -> None:
    try:
        families.get_family(kind, spec["family"]).resolve(spec.get("params"))
    except KeyError as exc:
        raise ConfigError(path, exc.args[0]) from None


def load(path: str | Path, cap: int | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("$", "config must be a JSON object")
    return validate(data, cap)
