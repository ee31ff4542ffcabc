"""Sectioned key = value configuration with layered precedence.

Effective settings = dataclass defaults, overridden by a config file,
overridden by --set section.key=value pairs.  The effective config is
echoed into every run directory so a run can be reproduced from it.
"""
from __future__ import annotations

import ast
import os
from dataclasses import asdict, fields, replace

from .scene import SyntheticScene
from .training import TrainConfig

SECTIONS = {"train": TrainConfig, "synth": SyntheticScene}


class ConfigError(ValueError):
    pass


def parse_value(text):
    """Python-literal values where possible, bare strings otherwise."""
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path):
    """Parse a sectioned key = value file into {section: {key: value}}."""
    out = {}
    section = None
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                out.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            if section is None:
                raise ConfigError(f"{path}:{ln}: key outside any [section]")
            key, val = (s.strip() for s in line.split("=", 1))
            out[section][key] = parse_value(val)
    return out


def apply_sets(cfg: dict, sets):
    """Apply --set section.key=value overrides (highest precedence)."""
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        if "." in key:
            section, name = key.split(".", 1)
        else:
            section, name = "train", key
        cfg.setdefault(section, {})[name.strip()] = parse_value(val.strip())
    return cfg


def _build(section, cls, overrides):
    valid = {f.name for f in fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    coerced = {}
    for k, v in overrides.items():
        if isinstance(v, list):
            v = tuple(v)
        coerced[k] = v
    return replace(cls(), **coerced)


def effective_config(config_file=None, sets=None, seed=None):
    """(TrainConfig, SyntheticScene) after all precedence layers."""
    raw = read_config(config_file) if config_file else {}
    for s in raw:
        if s not in SECTIONS:
            raise ConfigError(f"unknown config section [{s}]")
    apply_sets(raw, sets)
    train_cfg = _build("train", TrainConfig, raw.get("train", {}))
    synth_cfg = _build("synth", SyntheticScene, raw.get("synth", {}))
    if seed is not None:
        train_cfg = replace(train_cfg, seed=int(seed))
        synth_cfg = replace(synth_cfg, seed=int(seed))
    return train_cfg, synth_cfg


def write_config(path, train_cfg: TrainConfig = None,
                 synth_cfg: SyntheticScene = None):
    """Echo effective settings as a config file (atomic)."""
    chunks = []
    for name, obj in (("train", train_cfg), ("synth", synth_cfg)):
        if obj is None:
            continue
        chunks.append(f"[{name}]")
        for k, v in asdict(obj).items():
            chunks.append(f"{k} = {v!r}")
        chunks.append("")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(chunks))
    os.replace(tmp, path)
