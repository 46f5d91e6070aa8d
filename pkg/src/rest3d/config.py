"""Flat ``key = value`` configuration files.

One file carries dataset, training and ablation-plan keys. Every known key
must be present; ``--set KEY=VALUE`` overrides are applied afterwards.
"""

from __future__ import annotations

from dataclasses import asdict, fields, replace
from pathlib import Path

from .scenes import DatasetConfig, SceneConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, kind: str, message: str, key: str = ""):
        super().__init__(message)
        self.kind = kind
        self.key = key


SCENE_KEYS = [f.name for f in fields(SceneConfig)]
DATASET_KEYS = ["n_scenes", "samples_per_scene", "n_val_scenes", "unique_rate", "data_seed"]
TRAIN_KEYS = TrainConfig.keys()
PLAN_KEYS = ["label_ratios", "modes", "tscs_periods", "seeds"]
ALL_KEYS = DATASET_KEYS + SCENE_KEYS + TRAIN_KEYS + PLAN_KEYS

_PLAN_DEFAULTS = {
    "label_ratios": "0.01,0.02,0.05,0.1",
    "modes": "supervised,ssl_plain,ssl_qdw,ssl_tscs,ssl_full",
    "tscs_periods": "mid",
    "seeds": "0,1,2,3,4",
}

_TYPES = {}
for _f in fields(SceneConfig):
    _TYPES[_f.name] = type(getattr(SceneConfig(), _f.name))
for _f in fields(TrainConfig):
    _TYPES[_f.name] = type(getattr(TrainConfig(), _f.name))
_TYPES.update(n_scenes=int, samples_per_scene=int, n_val_scenes=int, unique_rate=float, data_seed=int)
for _k in PLAN_KEYS:
    _TYPES[_k] = str


def default_values() -> dict:
    values = {}
    values.update(asdict(SceneConfig()))
    d = DatasetConfig()
    values.update(
        n_scenes=d.n_scenes, samples_per_scene=d.samples_per_scene, n_val_scenes=d.n_val_scenes,
        unique_rate=d.unique_rate, data_seed=0,
    )
    values.update(asdict(TrainConfig()))
    values.update(_PLAN_DEFAULTS)
    return values


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump(values: dict) -> str:
    sections = [
        ("dataset", DATASET_KEYS + SCENE_KEYS),
        ("training", TRAIN_KEYS),
        ("ablation plan", PLAN_KEYS),
    ]
    lines = []
    for title, keys in sections:
        lines.append(f"# {title}")
        lines += [f"{k} = {_format(values[k])}" for k in keys]
        lines.append("")
    return "\n".join(lines)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError("unknown_key", f"unknown config key: {key}", key)
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError("bad_value", f"bad value for {key}: {text!r}", key) from None


def parse_text(text: str, require_all: bool = True) -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("syntax", f"line {n}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        values[key] = parse_value(key, value)
    if require_all:
        for key in ALL_KEYS:
            if key not in values:
                raise ConfigError("missing_key", f"missing config key: {key}", key)
    return values


def load(path, overrides=()) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("io", f"cannot read config {path}: {exc.strerror}") from None
    values = parse_text(text)
    return apply_overrides(values, overrides)


def apply_overrides(values: dict, overrides) -> dict:
    values = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("syntax", f"override must be KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = parse_value(key.strip(), value)
    return values


def dataset_config(values: dict) -> DatasetConfig:
    scene = SceneConfig(**{k: values[k] for k in SCENE_KEYS})
    return DatasetConfig(
        scene=scene,
        n_scenes=values["n_scenes"],
        samples_per_scene=values["samples_per_scene"],
        n_val_scenes=values["n_val_scenes"],
        unique_rate=values["unique_rate"],
    )


def train_config(values: dict, mode: str = None) -> TrainConfig:
    from .trainer import MODES

    cfg = TrainConfig(**{k: values[k] for k in TRAIN_KEYS})
    if mode is not None:
        if mode not in MODES:
            raise ConfigError("bad_value", f"unknown mode: {mode}", "mode")
        cfg = replace(cfg, **MODES[mode])
    return cfg


def split_list(text: str, kind=str) -> list:
    return [kind(x.strip()) for x in str(text).split(",") if x.strip()]
