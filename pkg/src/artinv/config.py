"""Run configuration: JSON file + dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Optional

from .corpus import SyntheticSpec
from .errors import ConfigError
from .training import ExperimentConfig

SECTIONS = ("experiment", "data", "synth", "eval", "predict", "plot", "paths")

DEFAULTS: dict = {
    "experiment": ExperimentConfig(speaker="synth_spk1").to_dict(),
    "data": {"manifests": []},
    "synth": {"name": "synth", "n_speakers": 1, "utterances_per_speaker": 20,
              "duration_range": [1.8, 2.2], "band_limit_hz": 8.0, "seed": 0, "map_seed": 1234,
              "noise_level": 0.01, "ema_sample_rate": 100.0, "speaker_offset_mm": 0.8,
              "speaker_map_jitter": 0.15, "envelope_depth": 0.8, "global_offset_mm": 0.0,
              "dialect": "", "domain_shift": None},
    "eval": {"aggregation": "utterance", "split": "test"},
    "predict": {"split": "test"},
    "plot": {"utterance": None},
    "paths": {"model": None},
}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, path)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, keys: list[str], value: Any) -> None:
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    node[keys[-1]] = value


def resolve(path: Optional[str | Path] = None, overrides: Iterable[str] = (),
            seed: Optional[int] = None) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be an object")
        cfg = _merge(cfg, loaded)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    if seed is not None:
        cfg["experiment"]["seed"] = seed
        cfg["synth"]["seed"] = seed
    # validate eagerly so bad values fail with a config error
    experiment_config(cfg)
    synthetic_spec(cfg)
    return cfg


def experiment_config(cfg: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(cfg["experiment"])
    except TypeError as exc:
        raise ConfigError(f"bad experiment section: {exc}") from None


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = {k: v for k, v in cfg["synth"].items() if k != "domain_shift"}
    try:
        return SyntheticSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth section: {exc}") from None


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def snapshot(cfg: dict, inputs: Iterable[Path] = ()) -> str:
    """Resolved config plus content hashes of the input manifests."""
    body = {"config": cfg, "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()}}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
