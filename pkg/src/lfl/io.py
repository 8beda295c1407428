"""File formats: key = value run configs, lossless numeric CSV, and the report.json schema."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Bad or unknown configuration entry."""


# ---------------------------------------------------------------------------
# run configs
#
# One ``key = value`` pair per line; ``#`` starts a comment. Values are parsed
# by the per-command key tables below; unknown keys are rejected.


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(cast):
    def parse(v: str):
        return None if v.strip().lower() in ("", "none", "auto") else cast(v)

    return parse


def _list(cast):
    def parse(v: str):
        return [cast(s.strip()) for s in v.split(",") if s.strip()]

    return parse


_HYPER = {"gamma": float, "vartheta": float, "lam": float, "mu_alpha": float}

KEYS = {
    "generate": {
        "pattern": str, "N": int, "D": int, "K": int, "L": _opt(int), "sigma": float, "sigma_W": float,
        "seed": int, "alpha": _opt(float), "dense_rate": float, "n_blocks": int, "single_state": str,
        "out": str,
    },
    "fit": {
        "data": str, "model": str, "K": int, "L": _opt(int), "iters": int, "seed": int, "center": _bool,
        "score": str, "z_mode": str, "tol": float, "sigma2_w": float, "init": str, "sigma2": _opt(float),
        "update_sigma2": _bool, "K_max": _opt(int), "alpha": float, "squared": _bool, "out": str, **_HYPER,
    },
    "benchmark": {
        "patterns": _list(str), "Ks": _list(int), "models": _list(str), "seeds": int, "seed": int,
        "N": int, "D": int, "sigma": float, "sigma_W": float, "iters_em": int, "iters_gibbs": int,
        "score": str, "threads": int, "out": str,
    },
    "project": {"model_dir": str, "out": str},
}

DEFAULTS = {
    "generate": {"pattern": "balanced", "N": 1000, "D": 50, "K": 10, "L": None, "sigma": 0.1, "sigma_W": 1.0,
                 "seed": 0, "alpha": None, "dense_rate": 0.8, "n_blocks": 3, "single_state": "row", "out": "."},
    "fit": {"model": "afa-em", "L": None, "iters": 100, "seed": 0, "center": False, "score": "marginal",
            "z_mode": "icm", "tol": 1e-6, "sigma2_w": 1.0, "init": "pca", "sigma2": None, "update_sigma2": True,
            "K_max": None, "alpha": 1.0, "squared": True, "out": ".",
            "gamma": 1e-3, "vartheta": 1e-3, "lam": 1.0, "mu_alpha": 1.0},
    "benchmark": {"patterns": ["sparse", "dense", "subspace_clustering", "balanced", "single_state"],
                  "Ks": [10, 20], "models": ["fa", "fsfa", "isfa", "afa-gibbs", "afa-em"], "seeds": 3, "seed": 0,
                  "N": 1000, "D": 50, "sigma": 0.1, "sigma_W": 1.0, "iters_em": 100, "iters_gibbs": 200,
                  "score": "marginal", "threads": 1, "out": "."},
    "project": {"out": "."},
}

REQUIRED = {"generate": (), "fit": ("data", "K"), "benchmark": (), "project": ("model_dir",)}


def parse_config_text(text: str, command: str) -> dict:
    if command not in KEYS:
        raise ConfigError(f"unknown command {command!r}")
    table = KEYS[command]
    out = dict(DEFAULTS[command])
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in table:
            raise ConfigError(f"line {lineno}: unknown key {key!r} for {command} (allowed: {', '.join(sorted(table))})")
        try:
            out[key] = table[key](value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    missing = [k for k in REQUIRED[command] if k not in out]
    if missing:
        raise ConfigError(f"missing required keys for {command}: {', '.join(missing)}")
    return out


def load_config(path, command: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, command)


def format_config(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, M) -> None:
    M = np.atleast_2d(np.asarray(M))
    integer = np.issubdtype(M.dtype, np.integer) or M.dtype == bool
    with open(path, "w", newline="") as fh:
        for row in M:
            fh.write(",".join(str(int(v)) if integer else repr(float(v)) for v in row))
            fh.write("\n")


def read_csv(path) -> np.ndarray:
    try:
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read matrix from {path}: {e}") from None
    return M


# ---------------------------------------------------------------------------
# report.json

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "fit report",
    "type": "object",
    "required": ["model", "config", "loglik_trace", "mae", "rmse_mean", "rmse_std", "popularity",
                 "iterations", "wall_seconds", "extra"],
    "properties": {
        "model": {"type": "string"},
        "config": {"type": "object"},
        "loglik_trace": {"type": "array", "items": {"type": ["number", "null"]}},
        "mae": {"type": ["number", "null"], "minimum": 0},
        "rmse_mean": {"type": ["number", "null"], "minimum": 0},
        "rmse_std": {"type": ["number", "null"], "minimum": 0},
        "popularity": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "iterations": {"type": "integer", "minimum": 0},
        "wall_seconds": {"type": "number", "minimum": 0},
        "eigvals": {"type": "array", "items": {"type": "number"}},
        "extra": {"type": "object"},
    },
}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None  # JSON has no inf/nan
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
