"""Experiment configuration: JSON schema validation and typed accessors."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .forward import ForwardOptions
from .grid import GridSpec
from .hol import EpsilonLadder
from .profiles import profile_files

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "grid": {
            "type": "object", "additionalProperties": False, "required": ["n"],
            "properties": {"box": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
                           "n": {"type": "integer", "minimum": 8}},
        },
        "nonlinearity": {
            "type": "object", "additionalProperties": False, "required": ["terms"],
            "properties": {"terms": {"type": "array", "maxItems": 8, "items": {
                "type": "object", "additionalProperties": False, "required": ["r", "q"],
                "properties": {"r": {"type": "number", "exclusiveMinimum": 1}, "q": {"type": "string"},
                               "q_neg": {"type": "string"}}}}},
        },
        "forward": {
            "type": "object", "additionalProperties": False,
            "properties": {"newton_tol": _pos, "max_newton": {"type": "integer", "minimum": 1},
                           "damping": _pos, "picard_fallback": {"type": "boolean"},
                           "max_picard": {"type": "integer", "minimum": 1},
                           "smallness_gate": {"type": ["number", "null"]}},
        },
        "trace": {"enum": ["stencil", "weak"]},
        "mask": {"type": "string"},
        "ladder": {
            "type": "object", "additionalProperties": False,
            "properties": {"start": _pos, "ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "count": {"type": "integer", "minimum": 1}, "theta": _pos,
                           "values": {"type": "array", "items": _pos, "minItems": 1}},
        },
        "boundary": {
            "type": "object", "additionalProperties": False, "required": ["profile"],
            "properties": {"profile": {"type": "string"},
                           "amplitudes": {"type": "array", "items": _pos, "minItems": 1}},
        },
        "identity": {
            "type": "object", "additionalProperties": False, "required": ["directions", "test"],
            "properties": {"f0": {"type": "string"}, "directions": {"type": "array", "items": {"type": "string"}},
                           "test": {"type": "string"}, "threshold": _pos, "exponent_tol": _pos,
                           "n_terms": {"type": "integer", "minimum": 1}},
        },
        "recovery": {
            "type": "object", "additionalProperties": False, "required": ["method"],
            "properties": {
                "method": {"enum": ["full", "partial", "staged"]},
                "r": {"type": "number", "exclusiveMinimum": 1},
                "m": {"type": "integer", "minimum": 0},
                "shape": {"enum": ["disc", "square"]},
                "dispersion": {"enum": ["analytic", "discrete"]},
                "n_terms": {"type": "integer", "minimum": 1},
                "basis": {"enum": ["cosine", "bspline"]},
                "d": {"type": "integer", "minimum": 1, "maximum": 64},
                "n_pairs": {"type": "integer", "minimum": 1},
                "lam": {"type": "number", "minimum": 0},
                "lam_scale": {"type": "number", "minimum": 0},
                "row_normalize": {"type": "boolean"},
                "exponents": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}, "minItems": 1},
                "n_basis": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
        "thresholds": {
            "type": "object", "additionalProperties": False,
            "properties": {"l2_rel": _pos, "stage_rel": {"type": "array", "items": _pos},
                           "zero_floor": _pos, "zero_ratio": _pos, "residual": _pos, "spread": _pos, "newton_iterations":
                           {"type": "integer", "minimum": 1}, "replay": _pos},
        },
        "noise": {"type": "object", "additionalProperties": False,
                  "properties": {"level": {"type": "number", "minimum": 0}}},
        "reports": {"type": "array", "items": {"type": "string"}},
    },
}

DEFAULT_THRESHOLDS = {"l2_rel": {"full": 0.15, "partial": 0.25}, "stage_rel": [0.15, 0.25],
                      "zero_floor": 1e-6, "zero_ratio": 0.15, "residual": 1e-10, "spread": 1.5, "newton_iterations": 12,
                      "replay": 1e-9}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated config dict plus the directory that relative paths refer to."""

    data: dict
    base: Path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, path.parent)

    @classmethod
    def from_dict(cls, data: dict, base=".") -> "ExperimentConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        cfg = cls(copy.deepcopy(data), Path(base))
        cfg._check()
        return cfg

    def _check(self) -> None:
        self.grid()
        rs = self.exponents()
        if any(b <= a for a, b in zip(rs, rs[1:])):
            raise ConfigError(f"nonlinearity exponents must be strictly increasing, got {rs}")
        for term in self.data.get("nonlinearity", {}).get("terms", []):
            for ref in (term["q"], term.get("q_neg")):
                for name in profile_files(ref) if ref else []:
                    p = Path(name) if Path(name).is_absolute() else self.base / name
                    if not p.exists():
                        raise ConfigError(f"referenced field file {p} does not exist")
        rec = self.data.get("recovery")
        if rec and rec["method"] == "staged" and not self.recovery_exponents():
            raise ConfigError("staged recovery needs exponents")

    # -- accessors ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def name(self) -> str:
        return self.data.get("name", "experiment")

    def grid(self) -> GridSpec:
        return GridSpec.from_json(self.data["grid"])

    def exponents(self) -> list[float]:
        return [float(t["r"]) for t in self.data.get("nonlinearity", {}).get("terms", [])]

    def forward_options(self) -> ForwardOptions:
        try:
            return ForwardOptions(**self.data.get("forward", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad forward options: {exc}") from None

    @property
    def trace(self) -> str:
        return self.data.get("trace", "stencil")

    @property
    def mask_selector(self) -> str:
        return self.data.get("mask", "all")

    def ladder(self) -> EpsilonLadder:
        lad = self.data.get("ladder", {})
        theta = lad.get("theta", 0.5)
        try:
            if "values" in lad:
                return EpsilonLadder(tuple(lad["values"]), theta)
            return EpsilonLadder.geometric(lad.get("start", 0.03), lad.get("ratio", 0.5), lad.get("count", 6), theta)
        except ValueError as exc:
            raise ConfigError(f"bad ladder: {exc}") from None

    def recovery(self) -> dict:
        if "recovery" not in self.data:
            raise ConfigError("config has no recovery section")
        return self.data["recovery"]

    def recovery_exponents(self) -> list[float]:
        rec = self.data.get("recovery", {})
        if "exponents" in rec:
            return [float(r) for r in rec["exponents"]]
        if "r" in rec:
            return [float(rec["r"])]
        return self.exponents()

    def threshold(self, key: str, method: str | None = None):
        th = self.data.get("thresholds", {})
        if key in th:
            return th[key]
        val = DEFAULT_THRESHOLDS[key]
        return val[method] if isinstance(val, dict) else val

    def fingerprint(self) -> str:
        payload = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.blake2b(payload, digest_size=8).hexdigest()
