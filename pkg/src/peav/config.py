"""Experiment configuration: defaults, JSON schema, overrides and hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os

import jsonschema

from .errors import ConfigurationError

TABLE8_ROWS = [
    ["A-AT"],
    ["A-AT", "V-VT"],
    ["A-AT", "V-VT", "AV-AVT"],
    ["A-V", "A-AT", "V-VT", "AV-AVT"],
    ["A-V", "A-AT", "V-AT", "V-VT", "AV-AT", "AV-AVT"],
    ["A-AT", "A-V", "A-AVT", "AV-AT", "AV-AVT", "V-AT", "V-VT", "V-AVT"],
]

DEFAULTS = {
    "seed": 0,
    "mode": "contrastive",
    "model": {"preset": "TOY"},
    "registry": {"preset": "PRETRAIN_8", "pairs": None},
    "training": {"steps": 800, "batch": 32, "lr": 0.05, "momentum": 0.9, "p_local": 0.7,
                 "include_ancestors": False},
    "data": {
        "kind": "contrastive",
        "dir": None,
        "n_clips": 256,
        "n_concepts": 32,
        "noise": 0.1,
        "duration_range": [5.0, 10.0],
        "mix": {"real": 1.0},
        "transcript_fraction": 0.0,
        "polyphony_max": 2,
        "smear_frames": 2,
        "test_fraction": 0.25,
    },
    "eval": {
        "tasks": None,
        "ks": [1, 5, 10],
        "sharpen": 10.0,
        "median_filter": 9,
        "segment_s": 1.0,
        "psds": {"rho_dtc": 0.7, "rho_gtc": 0.7, "alpha_st": 1.0, "alpha_ct": 0.0, "e_max": 100.0},
    },
    "ablation": {"rows": TABLE8_ROWS, "seeds": [0]},
    "bench": {"W": 8, "P": 4, "B": 1024, "C_h": 1024, "latency_per_call": 5e-5,
              "bandwidth": 1e10},
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": list(DEFAULTS),
    "properties": {
        "seed": _nonneg_int,
        "mode": {"enum": ["contrastive", "frame"]},
        "model": {"type": "object", "additionalProperties": False,
                  "properties": {"preset": {"enum": ["S", "B", "L", "TOY"]}}},
        "registry": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["PRETRAIN_8", "FINETUNE_10"]},
                "pairs": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
            },
        },
        "training": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "steps": _nonneg_int, "batch": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "p_local": _prob, "include_ancestors": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["contrastive", "sed"]},
                "dir": {"type": ["string", "null"]},
                "n_clips": _pos_int,
                "n_concepts": {"type": "integer", "minimum": 2},
                "noise": {"type": "number", "minimum": 0},
                "duration_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                   "minItems": 2, "maxItems": 2},
                "mix": {"type": "object", "additionalProperties": _prob, "minProperties": 1},
                "transcript_fraction": _prob,
                "polyphony_max": _pos_int,
                "smear_frames": _nonneg_int,
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "tasks": {"type": ["array", "null"], "items": {"type": "string"}},
                "ks": {"type": "array", "items": _pos_int, "minItems": 1},
                "sharpen": {"type": "number", "exclusiveMinimum": 0},
                "median_filter": _pos_int,
                "segment_s": {"type": "number", "exclusiveMinimum": 0},
                "psds": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"rho_dtc": _prob, "rho_gtc": _prob, "alpha_st": _num,
                                   "alpha_ct": _num, "e_max": _num},
                },
            },
        },
        "ablation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "rows": {"type": "array", "minItems": 1,
                         "items": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
                "seeds": {"type": "array", "items": _nonneg_int, "minItems": 1},
            },
        },
        "bench": {
            "type": "object", "additionalProperties": False,
            "properties": {"W": _pos_int, "P": _pos_int, "B": _pos_int, "C_h": _pos_int,
                           "latency_per_call": {"type": "number", "minimum": 0},
                           "bandwidth": {"type": "number", "exclusiveMinimum": 0}},
        },
    },
}


def merge(base: dict, update: dict) -> dict:
    """Recursive dict merge; ``update`` wins on leaves."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def set_path(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for k in path[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigurationError(f"unknown config section {'.'.join(path)!r}")
        node = node[k]
    node[path[-1]] = value


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {exc.message}") from None
    lo, hi = cfg["data"]["duration_range"]
    if lo > hi:
        raise ConfigurationError("data.duration_range must be increasing")
    if abs(sum(cfg["data"]["mix"].values()) - 1.0) > 1e-9:
        raise ConfigurationError("data.mix ratios must sum to 1")
    return cfg


def load_config(path=None, overrides=(), environ=None) -> dict:
    """Defaults, then the JSON file, then PEAV_SEED, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be an object")
        cfg = merge(cfg, user)
    environ = os.environ if environ is None else environ
    if environ.get("PEAV_SEED") not in (None, ""):
        try:
            cfg["seed"] = int(environ["PEAV_SEED"])
        except ValueError:
            raise ConfigurationError(f"PEAV_SEED={environ['PEAV_SEED']!r} is not an integer") from None
    for item in overrides:
        set_path(cfg, *parse_override(item))
    return validate(cfg)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
