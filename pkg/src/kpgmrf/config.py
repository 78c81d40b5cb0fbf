"""Run configuration: defaults, INI files and command-line overrides.

An INI file has the sections below; every key is optional and any key can
be overridden by the matching command-line flag.

    [run]
    seed = 20240101
    threads = 4

    [sampler]
    prior = laplace:0.1
    chains = 12
    draws = 1000
    warmup = 1000
    thin = 10

    [predict]
    thin = 1
    sweeps = 10

    [contrast]
    year_a = 2011
    year_b = 2021
    ratio_up = 1.5
    ratio_down = 0.5
    prob = 0.95

    [cv]
    folds = 5
    by_series = false
    window =

    [data]
    countries = path/to/countries.csv
    percent = false
    dup_tol = 1e-12
"""

from __future__ import annotations

import configparser
import os

from .errors import ConfigError

DEFAULTS = {
    "run": {"seed": None, "threads": None},
    "sampler": {"prior": "laplace:0.1", "chains": 12, "draws": 1000, "warmup": None, "thin": 10},
    "predict": {"thin": 1, "sweeps": 10},
    "contrast": {"year_a": 2011, "year_b": 2021, "ratio_up": 1.5, "ratio_down": 0.5, "prob": 0.95},
    "cv": {"folds": 5, "by_series": False, "window": None},
    "data": {"countries": None, "percent": False, "dup_tol": 1e-12},
}

_TYPES = {
    ("run", "seed"): int, ("run", "threads"): int,
    ("sampler", "chains"): int, ("sampler", "draws"): int, ("sampler", "warmup"): int,
    ("sampler", "thin"): int, ("predict", "thin"): int, ("predict", "sweeps"): int,
    ("contrast", "year_a"): int, ("contrast", "year_b"): int,
    ("contrast", "ratio_up"): float, ("contrast", "ratio_down"): float, ("contrast", "prob"): float,
    ("cv", "folds"): int, ("cv", "window"): int, ("data", "dup_tol"): float,
}
_BOOLS = {("cv", "by_series"), ("data", "percent")}


def _convert(section, key, text):
    if text is None or (isinstance(text, str) and text.strip() == ""):
        return None
    if (section, key) in _BOOLS:
        if isinstance(text, bool):
            return text
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")
    conv = _TYPES.get((section, key))
    if conv is None:
        return str(text).strip() if isinstance(text, str) else text
    try:
        return conv(text)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def load_config(path=None):
    """Defaults merged with an optional INI file; unknown keys are errors."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    for sec in cp.sections():
        if sec not in cfg:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, val in cp[sec].items():
            if key not in cfg[sec]:
                raise ConfigError(f"unknown config key [{sec}] {key}")
            cfg[sec][key] = _convert(sec, key, val)
    return cfg


def override(cfg, section, key, value):
    """Apply a command-line value when it was given."""
    if value is not None:
        cfg[section][key] = _convert(section, key, value)


def resolve_threads(cfg):
    n = cfg["run"]["threads"]
    return max(1, n if n is not None else (os.cpu_count() or 1))
