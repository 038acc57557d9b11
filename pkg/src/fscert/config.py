"""Run configuration: nested JSON with a schema version, merged over defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "data": {"K": 4, "per_class": 200, "d_in": 16, "separation": 1.0, "spread": 0.1,
             "latent_dim": 2, "holdout": 0.25},
    "encoder": {"kind": "mlp", "d_f": 8, "hidden_dims": [32], "gain": 3.0,
                "epochs": 0, "lr": 0.05, "temperature": 10.0, "batch_size": 32},
    # reference recipe for the booster: Adam 1e-4 batch 8 (denoiser), AdamW 2e-4 batch 16 with
    # cosine annealing (mapper); plain SGD at toy scale
    "gsb": {"sigma": 0.25, "n0": 8, "lambda1": 0.25, "lambda2": 100.0, "lambda3": 0.25,
            "optimizer": "sgd", "lr_p": 0.03, "lr_m": 0.05, "epochs_p": 30, "epochs_m": 30,
            "batch_size": 8, "denoiser_hidden": 64, "mapper_blocks": 3, "mapper_hidden": 32,
            "train_denoiser": True, "train_mapper": True, "holdout_n": 256, "heldout_inputs": 64},
    "smoothing": {"sigma": 0.25, "n_samples": 10000, "alpha": 0.001, "mode": "certified"},
    "certify": {"eps_list": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25], "level": "both", "compare_rs": False,
                "rs_n_select": 100, "rs_n_estimate": 10000, "inputs": 100, "target_cos": 0.5},
    "attack": {"preset": "all", "norm": "l2", "steps": 500, "eot_samples": 16, "rho": 0.9,
               "inputs": 200, "measure_factor": 5, "measure_seed": 1,
               "fcs_eps": 1.0, "fcs_steps": 200, "fcs_eot": 8, "fcs_inputs": 50},
    "verify": {"grid": "default", "sphere_samples": 1000000, "identity_inputs": 20,
               "identity_samples": 2000},
}

CHOICES = {
    ("encoder", "kind"): ("random-linear", "mlp"),
    ("gsb", "optimizer"): ("sgd", "adam"),
    ("smoothing", "mode"): ("point-estimate", "certified"),
    ("certify", "level"): ("feature", "prediction", "both"),
    ("attack", "preset"): ("soundness", "fcs", "all"),
    ("attack", "norm"): ("l2", "linf"),
    ("verify", "grid"): ("default", "fine"),
}


class ConfigError(ValueError):
    pass


def _check_type(path: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section")
            out[key] = merge(base[key], value, path + ".")
        elif base[key] is None or value is None:
            out[key] = value
        else:
            out[key] = _check_type(path, base[key], value)
    return out


def validate(cfg: dict) -> dict:
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported value {cfg['schema_version']!r}")
    for (sec, key), allowed in CHOICES.items():
        if cfg[sec][key] not in allowed:
            raise ConfigError(f"{sec}.{key}: must be one of {allowed}, got {cfg[sec][key]!r}")
    d = cfg["data"]
    if d["K"] < 2:
        raise ConfigError(f"data.K: must be >= 2, got {d['K']}")
    if d["per_class"] < 1:
        raise ConfigError(f"data.per_class: must be >= 1, got {d['per_class']}")
    if not d["separation"] > 0:
        raise ConfigError(f"data.separation: must be > 0, got {d['separation']}")
    if not 0 <= d["holdout"] < 1:
        raise ConfigError(f"data.holdout: must lie in [0, 1), got {d['holdout']}")
    for sec in ("smoothing", "gsb"):
        if not cfg[sec]["sigma"] > 0:
            raise ConfigError(f"{sec}.sigma: must be > 0")
    if cfg["smoothing"]["n_samples"] < 1:
        raise ConfigError("smoothing.n_samples: must be >= 1")
    if not 0 < cfg["smoothing"]["alpha"] < 1:
        raise ConfigError("smoothing.alpha: must lie in (0, 1)")
    eps = cfg["certify"]["eps_list"]
    if not eps or any(not isinstance(e, (int, float)) or e < 0 for e in eps) or list(eps) != sorted(eps):
        raise ConfigError("certify.eps_list: must be a non-empty ascending list of budgets >= 0")
    if not 0 < cfg["attack"]["rho"] < 1:
        raise ConfigError("attack.rho: must lie in (0, 1)")
    return cfg


def load(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return merge(DEFAULTS, raw)


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
