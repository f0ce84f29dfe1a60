"""Run configuration shared by all CLI commands.

Three layers, lowest to highest precedence: built-in defaults, an
optional JSON config file, and explicit command-line flags. The fully
resolved dictionary is embedded in every artifact a command writes, so
a run can always be reconstructed from its outputs.
"""

import copy
import json

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "gen_data": {
        "n": 2000,
        "conflict_ratio": 0.0,
        "k": 12,
    },
    "train": {
        "phase": "backbone",
        "steps": 3000,
        "batch_size": 16,
        "learning_rate": None,
        "weight_decay": 1e-2,
        "cond_drop_p": 0.1,
        "grad_clip": 1.0,
        "min_events": None,
        "feature_mode": "avclip",
    },
    "generate": {
        "gamma": 7.0,
        "alpha": 0.5,
        "steps": 50,
    },
    "eval": {
        "mode": "disentangle",
        "gamma": 7.0,
        "alpha": 0.5,
        "steps": 50,
        "batch_size": 25,
        "alphas": [0.0, 0.25, 0.5, 0.75, 1.0],
    },
}


def deep_merge(base, override):
    """Merge ``override`` into a copy of ``base``.

    Nested dicts merge recursively; everything else (including lists)
    is replaced wholesale.
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config_file(path):
    """Parse a JSON config file into a dict of overrides."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read config file %s: %s" % (path, exc))
    except json.JSONDecodeError as exc:
        raise ConfigError("config file %s is not valid JSON: %s" % (path, exc))
    if not isinstance(loaded, dict):
        raise ConfigError(
            "config file %s must contain a JSON object, got %s"
            % (path, type(loaded).__name__)
        )
    unknown = sorted(set(loaded) - set(DEFAULTS))
    if unknown:
        raise ConfigError(
            "config file %s has unknown keys: %s" % (path, ", ".join(unknown))
        )
    return loaded


def resolve_config(file_path=None, overrides=None):
    """Defaults, then the config file, then flag overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if file_path is not None:
        cfg = deep_merge(cfg, load_config_file(file_path))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg
