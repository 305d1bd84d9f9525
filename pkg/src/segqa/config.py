"""Run configuration: one YAML document, dotted-path overrides, unknown keys rejected."""

from __future__ import annotations

import copy
import re
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .model import ModelConfig
from .training import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads 1e-4 style floats (YAML 1.1 insists on a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _dc_defaults(cls, drop=()) -> Dict[str, Any]:
    return {f.name: copy.deepcopy(f.default) for f in fields(cls) if f.name not in drop}


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "dataset": {
        "sources": None,
        "confusions": None,
        "patch_size": 1024,
        "split": [0.8, 0.2],
        "feature_root": None,
        "feature_refs": {},
        "exclude": {},
        "methods": None,
        "manifest": None,
        "labels": None,
    },
    "model": _dc_defaults(ModelConfig),
    "train": {**_dc_defaults(TrainConfig, drop=("seed",)), "methods": None, "checkpoints": None},
    "loss": _dc_defaults(LossConfig),
    "metrics": {"split": "test", "predictions": None, "checkpoints": None},
    "recommend": {"predictions": None, "truth": None, "split": "test",
                  "pred_tol": 1e-12, "truth_tol": 1e-9},
    "purify": {
        "captions": None,
        "image_embeddings": None,
        "text_embeddings": None,
        "image_refs": None,
        "tau": None,
        "tau_quantile": 0.3,
        "client": "mock",
        "url": None,
        "timeout": 30.0,
        "max_attempts": 3,
        "backoff": 0.5,
        "max_in_flight": 4,
        "prompt": {"instruction": None, "metacaption": None, "example": None},
    },
    "report": {"inputs": None},
}

# free-form mappings whose keys are user data rather than schema
_OPEN_MAPS = {"dataset.feature_refs", "dataset.exclude"}


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and path not in _OPEN_MAPS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def set_dotted(cfg: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        path = ".".join(parts[:i + 1])
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {path!r}")
        node = node[p]
        if path in _OPEN_MAPS:
            node[".".join(parts[i + 1:])] = value
            return
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override must be key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), _load_yaml(raw)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None
                ) -> Dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        data = _load_yaml(p.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data)
    for ov in overrides:
        key, value = parse_override(ov)
        set_dotted(cfg, key, value)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dump_config(cfg: Dict[str, Any]) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def _build(cls, section: str, **kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def model_config(cfg) -> ModelConfig:
    return _build(ModelConfig, "model", **cfg["model"])


def train_config(cfg) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in ("methods", "checkpoints")}
    return _build(TrainConfig, "train", seed=cfg["seed"], **t)


def loss_config(cfg) -> LossConfig:
    return _build(LossConfig, "loss", **cfg["loss"])
