"""Experiment configuration: nested JSON with defaults, dotted overrides, and validation."""

from __future__ import annotations

import json
import re
from dataclasses import asdict
from typing import Any, Dict, Iterable, Optional

from .constrained import ConstraintConfig, ConstraintError, SearchConfig
from .search_space import SearchSpace, SearchSpaceError


class ConfigError(ValueError):
    pass


def default_config() -> Dict[str, Any]:
    return {
        "data": {
            "source": "synth",
            "format": None,
            "split": "mixed",
            "subject": None,
            "holdout_ratio": 0.25,
            "sample_rate_hz": 250.0,
            "target_hz": 250.0,
            "window": 400,
            "stride": 50,
            "search_fraction": 1.0,
            "synth": {"classes": 4, "channels": 8, "points": 750, "trials_per_class": 200, "snr_db": 20.0,
                      "seed": None, "n_subjects": 3},
        },
        "space": "desk",
        "arch": {"n_pairs": 2, "n_nodes": 2, "channels": 8, "classes": 4, "activation": "elu"},
        "search": {k: v for k, v in asdict(SearchConfig()).items() if k != "seed"},
        "constraints": {**asdict(ConstraintConfig()), "c_low": None, "c_high": None},
        "retrain": {"epochs": 30, "batch_size": 32, "lr": 0.025, "lr_min": 1e-4, "momentum": 0.9,
                    "weight_decay": 3e-4, "grad_clip": 5.0},
        "stats": {"threshold": 0.1, "threshold_mode": "relative", "best_scope": "global"},
        "seed": 0,
        "output_dir": "runs/ctnas",
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key != "space":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            _merge(base[key], value, where)
        else:
            base[key] = value


def load_config(path: Optional[str] = None, overrides: Iterable[tuple] = ()) -> Dict[str, Any]:
    """Defaults, then the JSON file, then ``(dotted.key, value)`` overrides."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
    for key, value in overrides:
        set_path(cfg, key, value)
    validate(cfg)
    return cfg


def set_path(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[:i + 1])}'")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[parts[-1]] = value


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _positive_int(cfg, dotted):
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    _check(isinstance(node, int) and not isinstance(node, bool) and node >= 1, f"'{dotted}' must be an integer >= 1")


def build_space(cfg: dict) -> SearchSpace:
    channels = cfg["arch"]["channels"]
    spec = cfg["space"]
    try:
        if isinstance(spec, str):
            return SearchSpace.named(spec, channels)
        if isinstance(spec, list):
            return SearchSpace.from_names(spec, channels)
    except SearchSpaceError as exc:
        raise ConfigError(f"space: {exc}") from None
    raise ConfigError("'space' must be 'desk', 'full', or a list of operator names")


def _bound(value, default: float, cfg: dict, key: str) -> float:
    """A bound is a number, null (scaled default), or "pNN": the NN-th percentile of achievable counts."""
    if value is None:
        return default
    if isinstance(value, str):
        m = re.fullmatch(r"p(\d+(?:\.\d+)?)", value.strip())
        if not m or not 0 < float(m.group(1)) <= 100:
            raise ConfigError(f"'constraints.{key}' must be a number, null, or a percentile like \"p40\"")
        from .genotype import achievable_counts, count_percentile
        a = cfg["arch"]
        counts, weights = achievable_counts(build_space(cfg), a["n_pairs"], a["n_nodes"], a["classes"])
        return count_percentile(counts, weights, float(m.group(1)) / 100.0)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'constraints.{key}' must be a number, null, or a percentile like \"p40\"")
    return float(value)


def constraint_config(cfg: dict) -> ConstraintConfig:
    c = dict(cfg["constraints"])
    scaled = ConstraintConfig.scaled_defaults(cfg["arch"]["channels"])
    c["c_low"] = _bound(c.get("c_low"), scaled.c_low, cfg, "c_low")
    c["c_high"] = _bound(c.get("c_high"), scaled.c_high, cfg, "c_high")
    return ConstraintConfig(**c)


def search_config(cfg: dict) -> SearchConfig:
    s = dict(cfg["search"])
    s["arch_betas"] = tuple(s["arch_betas"])
    s["arch_milestones"] = tuple(s["arch_milestones"])
    return SearchConfig(seed=cfg["seed"], **s)


def validate(cfg: dict) -> None:
    for key in ("arch.n_pairs", "arch.n_nodes", "arch.channels", "arch.classes", "search.batch_size",
                "retrain.batch_size", "data.window", "data.stride"):
        _positive_int(cfg, key)
    for key in ("search.epochs", "retrain.epochs", "search.patience"):
        v = cfg[key.split(".")[0]][key.split(".")[1]]
        _check(isinstance(v, int) and not isinstance(v, bool) and v >= 0, f"'{key}' must be an integer >= 0")
    _check(isinstance(cfg["seed"], int), "'seed' must be an integer")
    d = cfg["data"]
    _check(d["split"] in ("mixed", "subject_specific", "leave_ratio"),
           "'data.split' must be mixed, subject_specific, or leave_ratio")
    _check(d["split"] != "subject_specific" or d["subject"] is not None,
           "'data.subject' is required for a subject_specific split")
    _check(0 < d["holdout_ratio"] < 1, "'data.holdout_ratio' must lie in (0, 1)")
    _check(0 < d["search_fraction"] <= 1, "'data.search_fraction' must lie in (0, 1]")
    _check(d["sample_rate_hz"] > 0 and d["target_hz"] > 0, "sample rates must be > 0")
    _check(isinstance(d["source"], str) and d["source"], "'data.source' must be 'synth' or a path")
    if d["source"] == "synth":
        s = d["synth"]
        _check(s["channels"] == cfg["arch"]["channels"], "'data.synth.channels' must equal 'arch.channels'")
        _check(s["classes"] == cfg["arch"]["classes"], "'data.synth.classes' must equal 'arch.classes'")
        _check(s["points"] >= d["window"], "'data.synth.points' must be >= 'data.window'")
    _check(cfg["arch"]["activation"] in ("elu", "leaky_relu"), "'arch.activation' must be elu or leaky_relu")
    build_space(cfg)
    try:
        cc = constraint_config(cfg)
        from .supernet import CellTopology
        cc.validate(2 * CellTopology(cfg["arch"]["n_nodes"]).num_edges)
    except (ConstraintError, TypeError) as exc:
        raise ConfigError(f"constraints: {exc}") from None
    try:
        search_config(cfg)
    except TypeError as exc:
        raise ConfigError(f"search: {exc}") from None
    st = cfg["stats"]
    _check(0 <= st["threshold"] < 1, "'stats.threshold' must lie in [0, 1)")
    _check(st["threshold_mode"] in ("relative", "absolute"), "'stats.threshold_mode' must be relative or absolute")
    _check(st["best_scope"] in ("global", "per_run"), "'stats.best_scope' must be global or per_run")


def save_config(cfg: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_value(text: str) -> Any:
    """Interpret a command-line override as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
