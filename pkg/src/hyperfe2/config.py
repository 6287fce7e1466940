"""Run configuration: JSON schema, defaults and validation.

A configuration is a JSON object. Unknown keys are rejected, missing keys
are filled from :data:`DEFAULTS`, and relative file paths are resolved
against the directory of the configuration file.

Defaults
--------
==========================  ===========================================
key                         default
==========================  ===========================================
mode                        ``"ecm"``
output                      ``"out"``
rve.mesh                    ``{"generator": "rve_with_pore"}``
rve.materials               J2 matrix (id 0) and elastic inclusion (id 1)
macro.mesh                  ``{"generator": "rectangle"}`` (10 x 2, 8 x 2 quad8)
macro.tip / t_end / steps   ``1.5`` / ``1.0`` / ``20``
rom.n_modes                 ``8`` (unless ``rom.energy`` is given)
hyper.criteria              ``"additional"``
hyper.source                ``"rom"``
sampling.k / seed           ``8`` / ``0``
solver.scheme               ``"monolithic"``
solver.tol                  ``1e-6``
micro.tol_rel               ``1e-8``
study.m_tilde               ``[]``
study.criteria              ``["conventional", "additional"]``
==========================  ===========================================
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    """Invalid configuration. ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p or '<root>'}: {m}" for p, m in self.errors))


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

_material = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["elastic", "j2", "vevp"]},
        "plane": {"enum": ["strain", "stress"]},
        "E": _pos, "nu": _num, "sigma_y0": _pos, "h": _num,
        "branches": {"type": "array", "items": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
        "H": _pos, "m": _pos, "R0": _pos, "K": _pos, "n": _pos, "S": _pos, "beta": _pos,
        "integration": {"enum": ["implicit", "implex"]},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"type": {"const": "elastic"}}}, "then": {"required": ["E", "nu"]}},
        {"if": {"properties": {"type": {"const": "j2"}}}, "then": {"required": ["E", "nu", "sigma_y0", "h"]}},
        {"if": {"properties": {"type": {"const": "vevp"}}}, "then": {"required": ["E", "nu"]}},
    ],
}

_mesh_ref = {
    "oneOf": [
        {"type": "string", "minLength": 1},
        {
            "type": "object",
            "required": ["generator"],
            "properties": {
                "generator": {"enum": ["rve_with_pore", "rectangle"]},
                "n": _posint, "pore_radius": {"type": "number", "minimum": 0},
                "etype": {"enum": ["tri3", "tri6", "quad4", "quad8"]},
                "length": _pos, "height": _pos, "nx": _posint, "ny": _posint, "size": _pos,
            },
            "additionalProperties": False,
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "mode": {"enum": ["hf", "rom", "ecm", "eheim"]},
        "output": {"type": "string"},
        "rve": {
            "type": "object",
            "properties": {
                "mesh": _mesh_ref,
                "materials": {
                    "type": "object",
                    "patternProperties": {"^[0-9]+$": _material},
                    "additionalProperties": False,
                    "minProperties": 1,
                },
            },
            "additionalProperties": False,
        },
        "macro": {
            "type": "object",
            "properties": {
                "mesh": _mesh_ref,
                "tip": _num, "t_end": _pos, "steps": _posint, "thickness": _pos,
            },
            "additionalProperties": False,
        },
        "rom": {
            "type": "object",
            "properties": {
                "n_modes": {"oneOf": [_posint, {"type": "null"}]},
                "energy": {"oneOf": [{"type": "number", "exclusiveMinimum": 0, "maximum": 1}, {"type": "null"}]},
                "energy_kind": {"enum": ["sum", "squared"]},
            },
            "additionalProperties": False,
        },
        "hyper": {
            "type": "object",
            "properties": {
                "m_tilde": {"oneOf": [_posint, {"type": "null"}]},
                "criteria": {"oneOf": [
                    {"enum": ["conventional", "additional"]},
                    {"type": "array", "items": {"enum": ["f_int", "f_sigma", "power", "strain", "stress", "energy"]},
                     "minItems": 1, "uniqueItems": True},
                ]},
                "source": {"enum": ["rom", "hf"]},
            },
            "additionalProperties": False,
        },
        "sampling": {
            "type": "object",
            "properties": {
                "k": _posint, "seed": {"type": "integer", "minimum": 0},
                "weights": {"oneOf": [{"type": "array", "items": _pos, "minItems": 3, "maxItems": 3}, {"type": "null"}]},
            },
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "scheme": {"enum": ["monolithic", "staggered"]},
                "tol": _pos, "max_iter": _posint, "max_halvings": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "micro": {
            "type": "object",
            "properties": {
                "tol_rel": _pos, "tol_abs_factor": _pos, "max_iter": _posint,
                "max_bisect": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "study": {
            "type": "object",
            "properties": {
                "m_tilde": {"type": "array", "items": _posint, "uniqueItems": True},
                "criteria": {"type": "array", "items": {"enum": ["conventional", "additional"]},
                             "minItems": 1, "uniqueItems": True},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "mode": "ecm",
    "output": "out",
    "rve": {
        "mesh": {"generator": "rve_with_pore"},
        "materials": {
            "0": {"type": "j2", "E": 1.0, "nu": 0.3, "sigma_y0": 0.01, "h": 0.016},
            "1": {"type": "elastic", "E": 10.0, "nu": 0.3},
        },
    },
    "macro": {"mesh": {"generator": "rectangle"}, "tip": 1.5, "t_end": 1.0, "steps": 20, "thickness": 1.0},
    "rom": {"n_modes": 8, "energy": None, "energy_kind": "sum"},
    "hyper": {"m_tilde": None, "criteria": "additional", "source": "rom"},
    "sampling": {"k": 8, "seed": 0, "weights": None},
    "solver": {"scheme": "monolithic", "tol": 1e-6, "max_iter": 25, "max_halvings": 4},
    "micro": {"tol_rel": 1e-8, "tol_abs_factor": 1e-10, "max_iter": 25, "max_bisect": 4},
    "study": {"m_tilde": [], "criteria": ["conventional", "additional"]},
}

# generator defaults, filled after validation
_GENERATORS = {
    "rve_with_pore": {"n": 12, "pore_radius": 0.18, "etype": "tri6", "size": 1.0},
    "rectangle": {"length": 10.0, "height": 2.0, "nx": 8, "ny": 2, "etype": "quad8"},
}

# keys whose whole value replaces the default instead of being merged
_ATOMIC = {("rve", "materials"), ("rve", "mesh"), ("macro", "mesh")}


def _merge(default, given, path=()):
    if not isinstance(default, dict) or not isinstance(given, dict) or path in _ATOMIC:
        return copy.deepcopy(given)
    out = copy.deepcopy(default)
    for k, v in given.items():
        out[k] = _merge(default.get(k), v, path + (k,)) if k in default else copy.deepcopy(v)
    return out


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        # "'m_tilde' is a required property"
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    return ".".join(p for p in parts if p)


def _errors(data) -> list:
    v = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(v.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        # report the most specific reason for oneOf/anyOf failures
        leaf = err
        if err.context:
            leaf = min(err.context, key=lambda e: (-len(e.absolute_path), str(e.message)))
        out.append((_path(leaf), leaf.message))
    return out


@dataclass
class RunConfig:
    """Validated configuration with every default filled in."""

    data: dict
    source: Path | None = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def mode(self) -> str:
        return self.data["mode"]

    @property
    def output(self) -> Path:
        return Path(self.data["output"])

    def to_json(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def with_overrides(self, **kw) -> "RunConfig":
        """Return a re-validated copy; keys are dotted paths such as ``"hyper.m_tilde"``."""
        d = copy.deepcopy(self.data)
        for key, value in kw.items():
            node = d
            *head, last = key.split(".")
            for h in head:
                node = node.setdefault(h, {})
            node[last] = value
        return config_from_dict(d, base_dir=None)


def config_from_dict(raw: dict, base_dir=None) -> RunConfig:
    """Validate ``raw``, fill defaults and resolve file paths."""
    if not isinstance(raw, dict):
        raise ConfigError([("", "configuration must be a JSON object")])
    errs = _errors(raw)
    if errs:
        raise ConfigError(errs)
    d = _merge(DEFAULTS, raw)
    if "rom" in raw and raw["rom"].get("energy") is not None and "n_modes" not in raw["rom"]:
        d["rom"]["n_modes"] = None
    errs = []
    if d["rom"]["n_modes"] is None and d["rom"]["energy"] is None:
        errs.append(("rom.n_modes", "give rom.n_modes or rom.energy"))
    if d["mode"] in ("ecm", "eheim") and d["hyper"]["m_tilde"] is None and not d["study"]["m_tilde"]:
        errs.append(("hyper.m_tilde", f"mode {d['mode']!r} requires hyper.m_tilde (or a study.m_tilde sweep)"))
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for sect in ("rve", "macro"):
        m = d[sect]["mesh"]
        if isinstance(m, str):
            p = (base / m).resolve()
            if not p.is_file():
                errs.append((f"{sect}.mesh", f"mesh file {str(p)!r} does not exist"))
            d[sect]["mesh"] = str(p)
        else:
            gen = dict(_GENERATORS[m["generator"]])
            bad = [k for k in m if k != "generator" and k not in gen]
            for k in bad:
                errs.append((f"{sect}.mesh.{k}", f"not a parameter of generator {m['generator']!r}"))
            gen.update(m)
            d[sect]["mesh"] = gen
    if errs:
        raise ConfigError(errs)
    return RunConfig(d, None if base_dir is None else Path(base_dir))


def parse_config(path) -> RunConfig:
    """Read and validate a JSON configuration file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([("", f"configuration file {str(path)!r} not found")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from None
    cfg = config_from_dict(raw, base_dir=path.parent)
    cfg.source = path
    return cfg
