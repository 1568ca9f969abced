"""Run configuration: flat key/value sections, file round-trip, overrides.

The effective configuration fully determines a run; it is echoed into every
output directory and serialized (flattened) into every checkpoint header.
"""

from __future__ import annotations

import configparser
import copy
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigurationError

# Toy-scale defaults; budgets sized for a desk CPU. The paper-scale variant
# lives in configs/paper_scale.cfg and is buildable but not trained in CI.
DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "num_characters": "8",
        "num_scenes": "4",
        "frames_per_story": "5",
        "image_size": "32",
        "caption_length": "16",
        "num_train": "512",
        "num_test": "200",
        "seed": "7",
    },
    "encoders": {
        "embed_dim": "128",
        "text_layers": "2",
        "text_heads": "4",
        "clip_iterations": "2500",
        "clip_batch": "64",
        "clip_lr": "3e-4",
        "ae_base_width": "32",
        "ae_iterations": "4000",
        "ae_batch": "32",
        "ae_lr": "2e-3",
        "latent_channels": "4",
        "downsample": "4",
        "psnr_floor": "28.0",
        "seed": "0",
        "log_every": "200",
        "checkpoint_every": "2000",
    },
    "prior": {
        "layers": "4",
        "width": "128",
        "heads": "4",
        "include_hidden_visual": "false",
        "schedule": "cosine",
        "timesteps": "1000",
        "iterations": "20000",
        "batch_size": "8",
        "lr": "2e-4",
        "weight_decay": "0.01",
        "cond_drop_prob": "0.10",
        "max_drop": "5",
        "seed": "1",
        "log_every": "200",
        "checkpoint_every": "5000",
    },
    "contextual": {
        "base_width": "32",
        "heads": "4",
        "context_dim": "128",
        "schedule": "linear",
        "timesteps": "1000",
        "iterations": "40000",
        "batch_size": "8",
        "lr": "2e-4",
        "weight_decay": "0.01",
        "cond_drop_prob": "0.10",
        "max_drop": "5",
        "use_image_condition": "true",
        "use_mim": "true",
        "use_ssm": "true",
        "use_stage1_prior": "true",
        "use_frame_attention": "true",
        "seed": "2",
        "log_every": "200",
        "checkpoint_every": "5000",
    },
    "sampler": {
        "steps": "20",
        "guidance_scale": "2.0",
    },
    "evaluation": {
        "classifier_iterations": "2500",
        "classifier_lr": "1e-3",
        "classifier_batch": "64",
        "classifier_floor": "0.95",
        "num_stories": "200",
        "seed": "5",
    },
    "runtime": {
        "threads": "1",
    },
}


def default_config() -> dict[str, dict[str, str]]:
    return copy.deepcopy(DEFAULTS)


def load_config(path: Path | str | None) -> dict[str, dict[str, str]]:
    """Defaults overlaid with the sections of an INI-style file (if given)."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    for section in parser.sections():
        if section not in cfg:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in cfg[section]:
                raise ConfigurationError(f"unknown config key {section}.{key}")
            cfg[section][key] = value
    return cfg


def save_config(cfg: dict[str, dict[str, str]], path: Path | str) -> None:
    parser = configparser.ConfigParser()
    for section, values in cfg.items():
        parser[section] = dict(values)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def apply_overrides(cfg: dict[str, dict[str, str]], overrides: list[str]) -> dict[str, dict[str, str]]:
    """Apply `section.key=value` overrides in place (before validation)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigurationError(f"override key must be dotted (section.key), got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in cfg:
            raise ConfigurationError(f"unknown config section [{section}]")
        if key not in cfg[section]:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        cfg[section][key] = value
    return cfg


def flatten(cfg: dict[str, dict[str, str]]) -> dict[str, str]:
    return {f"{s}.{k}": v for s, values in sorted(cfg.items()) for k, v in sorted(values.items())}


def _get(cfg: dict, section: str, key: str) -> str:
    try:
        return cfg[section][key]
    except KeyError:
        raise ConfigurationError(f"missing config key {section}.{key}") from None


def cfg_int(cfg: dict, section: str, key: str) -> int:
    raw = _get(cfg, section, key)
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"config key {section}.{key} must be an int, got {raw!r}") from None


def cfg_float(cfg: dict, section: str, key: str) -> float:
    raw = _get(cfg, section, key)
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {section}.{key} must be a float, got {raw!r}") from None


def cfg_bool(cfg: dict, section: str, key: str) -> bool:
    raw = _get(cfg, section, key).strip().lower()
    if raw in ("true", "1", "yes", "on"):
        return True
    if raw in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"config key {section}.{key} must be a boolean, got {raw!r}")


def cfg_str(cfg: dict, section: str, key: str) -> str:
    return _get(cfg, section, key)


def dataset_spec_from(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        num_characters=cfg_int(cfg, "data", "num_characters"),
        num_scenes=cfg_int(cfg, "data", "num_scenes"),
        frames_per_story=cfg_int(cfg, "data", "frames_per_story"),
        image_size=cfg_int(cfg, "data", "image_size"),
        caption_length=cfg_int(cfg, "data", "caption_length"),
        num_train=cfg_int(cfg, "data", "num_train"),
        num_test=cfg_int(cfg, "data", "num_test"),
        seed=cfg_int(cfg, "data", "seed"),
    )
