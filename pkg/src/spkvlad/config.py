"""Flat ``key = value`` run configuration shared by the CLI subcommands.

Files are UTF-8, one assignment per line, ``#`` starts a comment. Command
line ``--set key=value`` overrides are merged on top. Unknown keys are
rejected; every run should log the fully resolved mapping (``format_resolved``).
"""

from __future__ import annotations

from .model import ModelConfig, TrunkConfig
from .train import TrainConfig

# key -> (type, default); defaults mirror TrainConfig / ModelConfig.
KNOWN_KEYS = {
    "lr": (float, 1e-3),
    "decay_factor": (float, 10.0),
    "decay_epochs": (int, 8),
    "batch_size": (int, 16),
    "crop_seconds": (float, 2.5),
    "epochs": (int, 30),
    "seed": (int, 0),
    "loss": (str, "am_softmax"),
    "margin": (float, 0.4),
    "scale": (float, 30.0),
    "early_stop_patience": (int, 5),
    "checkpoint_every": (int, 10),
    "width_multiplier": (float, 1.0),
    "aggregation": (str, "ghostvlad"),
    "clusters": (int, 8),
    "ghost_clusters": (int, 2),
    "embed_dim": (int, 512),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key '{key}'")
    typ, _ = KNOWN_KEYS[key]
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r} is not {typ.__name__}") from exc


def parse_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = _coerce(key, raw)
    return values


def resolve(config_path=None, overrides=()) -> dict:
    """Defaults <- config file <- key=value overrides."""
    values = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def format_resolved(values: dict) -> str:
    return "\n".join(f"{key} = {values[key]}" for key in sorted(values))


def to_train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        lr=values["lr"], decay_factor=values["decay_factor"],
        decay_epochs=values["decay_epochs"], batch_size=values["batch_size"],
        crop_seconds=values["crop_seconds"], epochs=values["epochs"],
        loss=values["loss"], margin=values["margin"], scale=values["scale"],
        seed=values["seed"], early_stop_patience=values["early_stop_patience"],
        checkpoint_every=values["checkpoint_every"],
    )


def to_model_config(values: dict, num_classes: int = 0) -> ModelConfig:
    aggregation = values["aggregation"]
    return ModelConfig(
        trunk=TrunkConfig(width_multiplier=values["width_multiplier"]),
        aggregation=aggregation,
        clusters=values["clusters"],
        ghost_clusters=values["ghost_clusters"] if aggregation == "ghostvlad" else 0,
        embed_dim=values["embed_dim"],
        num_classes=num_classes,
        classifier="linear" if values["loss"] == "softmax" else "cosine",
    )
