"""Toolkit configuration: embedded defaults, a YAML file, env overrides, flags.

Precedence is flags > environment > file > defaults. Environment variables
take the form ``STATESTREAM_<SECTION>__<KEY>`` (for example
``STATESTREAM_LOSS__GAMMA=1.5``) and their values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

ENV_PREFIX = "STATESTREAM_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {
        "vocab_size": 256,
        "num_turns": 60,
        "tokens_per_turn": 4,
        "event_rate": None,
        "event_len_range": [1, 2],
        "target_state_ratio": [12.0, 3.0, 2.0],
        "num_classes": 4,
        "num_markers": 64,
        "num_episodes": 170,
        "seed": 0,
    },
    "model": {
        "embed_dim": 16,
        "context_window": 3,
        "turn_tokens": 8,
        "num_layers": 2,
        "hidden_dim": 32,
        "learning_rate": 0.1,
        "steps": 400,
        "batch_size": 8,
        "seed": 0,
        "optimizer": "sgd",
        "eval_every": 50,
        "holdout_fraction": 0.2,
    },
    "loss": {
        "mode": "focal",
        "gamma": 2.0,
        "fixed_weights": [0.3, 1.3, 2.0],
    },
    "engine": {
        "max_context_tokens": None,
        "overflow": "error",
        "tolerance": 1,
    },
    "eval": {
        "delta_t": 3.0,
        "swap": True,
        "content_judge": False,
    },
    "judge": {
        "mode": "mock-coinflip",
        "endpoint": None,
        "model": "judge",
        "path": "/v1/chat/completions",
        "api_key_env": "JUDGE_API_KEY",
        "fixtures_dir": None,
        "timeout": 30.0,
        "retries": 2,
        "max_in_flight": 8,
        "seed": 0,
    },
}


@dataclass
class ToolkitConfig:
    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return copy.deepcopy(self.sections)

    def merged(self, overrides: Mapping[str, Mapping[str, Any]], source: str) -> "ToolkitConfig":
        out = copy.deepcopy(self.sections)
        for section, values in overrides.items():
            if section not in out:
                raise ConfigError(f"{source}: unknown config section {section!r}")
            if not isinstance(values, Mapping):
                raise ConfigError(f"{source}: section {section!r} must be a mapping")
            for key, value in values.items():
                if key not in out[section]:
                    raise ConfigError(f"{source}: unknown key {section}.{key}")
                out[section][key] = value
        return ToolkitConfig(out)


def _env_overrides(environ: Mapping[str, str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX) :].partition("__")
        try:
            value = yaml.safe_load(raw) if raw != "" else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"environment {name}: cannot parse {raw!r}: {exc}") from None
        out.setdefault(section.lower(), {})[key.lower()] = value
    return out


def load_config(
    path: str | os.PathLike | None = None,
    *,
    environ: Mapping[str, str] | None = None,
    flags: Mapping[str, Mapping[str, Any]] | None = None,
) -> ToolkitConfig:
    """Resolve the effective configuration."""
    cfg = ToolkitConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"config file {path} must hold a mapping of sections")
        cfg = cfg.merged(data, str(path))
    env = _env_overrides(os.environ if environ is None else environ)
    if env:
        cfg = cfg.merged(env, "environment")
    if flags:
        cleaned = {s: {k: v for k, v in vals.items() if v is not None} for s, vals in flags.items()}
        cfg = cfg.merged(cleaned, "command line")
    return cfg
