"""Run configuration: desk-scale defaults, JSON schema validation, hashing.

Every command validates its config against the schema below before doing any
work; unknown keys are rejected outright so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .errors import ConfigError

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _INT,
        "out_dir": {"type": "string"},
        "config_hash": {"type": "string"},  # stamped into resolved run configs
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["lorenz63", "rossler", "lorenz96",
                                  "forced_fhn", "hindmarsh_rose"]},
                "dim": _INT,
                "params": {"type": "object", "additionalProperties": _NUM},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "n_points": {"type": "integer", "minimum": 1},
                "points_per_tl": {"type": "integer", "minimum": 1},
                "transient_tl": {"type": "number", "minimum": 0},
                "noise_sigma": {"type": "number", "minimum": 0},
                "n_test_ics": {"type": "integer", "minimum": 0},
                "val_len": {"type": "integer", "minimum": 0},
                "import_path": {"type": ["string", "null"]},
                "mle": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dt": {"type": "number", "exclusiveMinimum": 0},
                        "horizon_steps": {"type": "integer", "minimum": 100},
                        "renorm_interval": {"type": "integer", "minimum": 1},
                        "delta0": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
        "embedding": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "tau": {"type": "integer", "minimum": 1},
                "enabled": _BOOL,
                "patch_size": {"type": "integer", "minimum": 1},
                "tau_max": {"type": "integer", "minimum": 3},
                "m_max": {"type": "integer", "minimum": 2},
                "n_bins": {"type": "integer", "minimum": 2},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "saturation_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "L": {"type": "integer", "minimum": 1},
                "M": {"type": "integer", "minimum": 0},
                "expand": {"type": "integer", "minimum": 1},
                "head_dim": {"type": "integer", "minimum": 1},
                "state_size": {"type": "integer", "minimum": 1},
                "rs_enabled": _BOOL,
                "encoder_oriented": _BOOL,
                "exact_zoh": _BOOL,
                "rollout_envelope": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_p": {"type": "number", "minimum": 0},
                "lambda_c": {"type": "number", "minimum": 0},
                "lambda_r": {"type": "number", "minimum": 0},
                "tf_lr": {"type": "number", "exclusiveMinimum": 0},
                "sf_lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "tf_epochs": {"type": "integer", "minimum": 0},
                "sf_epochs": {"type": "integer", "minimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "sf_window_patches": {"type": ["integer", "null"], "minimum": 1},
                "kernel_sigmas": {"type": "array", "minItems": 1,
                                  "items": {"type": "number", "exclusiveMinimum": 0}},
                "sf_enabled": _BOOL,
                "mmd_enabled": _BOOL,
                "mpp_squared": _BOOL,
                "grad_clip": {"type": "number", "minimum": 0},
                "mmd_subsample": {"type": "integer", "minimum": 2},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 200},
                "gp_n_radii": {"type": "integer", "minimum": 2},
                "gp_quantiles": {"type": "array", "minItems": 2, "maxItems": 2,
                                 "items": _NUM},
                "gp_subsample": {"type": "integer", "minimum": 100},
                "gmm_scale": {"type": "number", "exclusiveMinimum": 0},
                "mc_samples": {"type": "integer", "minimum": 100},
                "subsample_cap": {"type": "integer", "minimum": 10},
            },
        },
    },
}


def default_config() -> dict:
    """Desk-scale defaults; full-scale values remain one override away."""
    return {
        "seed": 1,
        "system": {
            "name": "lorenz63",
            "dim": 3,
            "params": {},
            "dt": 0.001,
            "n_points": 3000,
            "points_per_tl": 30,
            "transient_tl": 10.0,
            "noise_sigma": 0.0,
            "n_test_ics": 10,
            "val_len": 150,
            "import_path": None,
            "mle": {"dt": 0.01, "horizon_steps": 200000,
                    "renorm_interval": 10, "delta0": 1e-7},
        },
        "embedding": {
            "m": 3, "tau": 7, "enabled": True, "patch_size": 10,
            "tau_max": 30, "m_max": 8, "n_bins": 16,
            "radius": 0.5, "saturation_tol": 0.05,
        },
        "model": {
            "d": 64, "L": 2, "M": 2, "expand": 2, "head_dim": 64,
            "state_size": 16, "rs_enabled": True, "encoder_oriented": False,
            "exact_zoh": False, "rollout_envelope": 1000.0,
        },
        "training": {
            "lambda_p": 0.1, "lambda_c": 1000.0, "lambda_r": 1.0,
            "tf_lr": 0.001, "sf_lr": 0.0001, "batch_size": 32,
            "tf_epochs": 50, "sf_epochs": 20, "patience": 5,
            "sf_window_patches": None,
            "kernel_sigmas": [0.2, 0.5, 0.9, 1.3],
            "sf_enabled": True, "mmd_enabled": True, "mpp_squared": False,
            "grad_clip": 1.0, "mmd_subsample": 256,
        },
        "metrics": {
            "epsilon": 30.0, "gp_n_radii": 12, "gp_quantiles": [0.002, 0.05],
            "gp_subsample": 2000, "gmm_scale": 1.0,
            "mc_samples": 5000, "subsample_cap": 500,
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, overlaid with the config file, overlaid with `overrides`.

    The file itself and the merged result must both satisfy the schema.
    """
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        validate_config(user)
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {err.message}") from err


def hash_config(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if k != "config_hash"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:12]
