"""Experiment configuration, read from and written to JSON.

Top-level blocks: ``seed``, ``sim``, ``dataset``, ``pca``, ``train`` and
``control``.  Unknown keys are rejected so typos surface as configuration
errors.  ``default_config()`` is the desk-scale setup; ``README.md`` lists
every key.
"""

from __future__ import annotations

import copy
import json

from .exceptions import ConfigurationError

DEFAULTS = {
    "seed": 0,
    "sim": {
        "grain": {
            "radius": 0.01,
            "mass": 0.01,
            "normal_stiffness": 1000.0,
            "normal_damping": 4.0,
            "friction_coeff": 0.9,
            "gravity": 9.81,
        },
        "box": {
            "width": 0.4,
            "wall_height": 0.3,
            "initial_position": [0.5, 0.0],
            "wall_particle_spacing": 0.02,
        },
        "substeps": 20,
        "v_max": 2.0,
    },
    "dataset": {
        "n_examples": 32,
        "n_frames": 90,
        "rate_hz": 60.0,
        "width_range": [0.38, 0.42],
        "frequency_range": [0.5, 3.0],
        "amplitude_range": [0.01, 0.04],
        "max_frequency": 3.0,
        "fill_width": 0.2,
        "fill_height": 0.2,
        "lattice_spacing": 0.02,
        "jitter": 0.1,
        "max_retries": 3,
        "workers": 1,
    },
    "pca": {"n_nr": 8},
    "train": {
        "history": 5,
        "latent_dim": 64,
        "mlp_hidden": [64, 64],
        "message_passes": 5,
        "learning_rate": 1e-3,
        "final_lr_ratio": 0.05,
        "batch_size": 16,
        "steps": 5000,
        "noise_std": 1e-4,
        "holdout": 4,
    },
    "control": {
        "box_width": 0.4,
        "horizon": 60,
        "target": {"kind": "slope", "x_left": 0.02, "x_right": 0.38, "angle_deg": 10.0},
        "cost": {"terminal_weight": 1.0, "running_weight": 0.0, "control_weight": 30.0},
        "ddp": {
            "max_iters": 100,
            "reg_init": 1e-6,
            "reg_min": 1e-12,
            "reg_max": 1e10,
            "reg_scale": 2.0,
            "rel_tol": 1e-6,
            "grad_tol": 1e-6,
        },
        "feedback": True,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown configuration key {where!r}")
        # a target is kind-specific and replaced as a whole
        if isinstance(base[key], dict) and key != "target":
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def default_config():
    return copy.deepcopy(DEFAULTS)


def make_config(overrides=None):
    cfg = _merge(DEFAULTS, overrides or {})
    validate_config(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return make_config(raw)


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def validate_config(cfg):
    ds = cfg["dataset"]
    lo, hi = ds["frequency_range"]
    if not 0 < lo <= hi:
        raise ConfigurationError("frequency_range must be increasing and positive")
    if hi > ds["max_frequency"]:
        raise ConfigurationError(
            f"frequency {hi} Hz exceeds the {ds['max_frequency']} Hz cap on box motion"
        )
    if ds["n_examples"] < 1 or ds["n_frames"] < cfg["train"]["history"] + 2:
        raise ConfigurationError("need at least one example of at least C+2 frames")
    if ds["rate_hz"] <= 0:
        raise ConfigurationError("rate_hz must be positive")
    w_lo, w_hi = ds["width_range"]
    if not 0 < w_lo <= w_hi:
        raise ConfigurationError("width_range must be increasing and positive")
    if ds["fill_width"] > w_lo:
        raise ConfigurationError("fill_width exceeds the narrowest box")
    if cfg["pca"]["n_nr"] < 1:
        raise ConfigurationError("n_nr must be >= 1")
    if not 0 <= cfg["train"]["holdout"] < ds["n_examples"]:
        raise ConfigurationError("holdout must leave at least one training example")
    if cfg["control"]["horizon"] < 1:
        raise ConfigurationError("control horizon must be >= 1")
    if cfg["control"]["cost"]["control_weight"] <= 0:
        raise ConfigurationError("control_weight must be positive")
    return cfg
