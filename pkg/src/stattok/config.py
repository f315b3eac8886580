"""JSON run configuration: sections data / tokenizer / losses / trainer /
ar / eval with exactly the keys of the owning dataclasses; unknown keys are
rejected and relative paths resolve against the config file."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .ar import ARConfig
from .losses import LossWeights
from .model import TokenizerConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 2048
    n_eval: int = 512
    image_size: int = 32
    num_classes: int = 10
    dir: str | None = None   # optional PPM directory override for training data


@dataclass
class EvalConfig:
    policy: str = "threshold:0.5"
    batch_size: int = 64


@dataclass
class RunConfig:
    data: DataConfig
    tokenizer: TokenizerConfig
    losses: LossWeights
    trainer: TrainerConfig
    ar: ARConfig
    eval: EvalConfig


_SECTIONS = {
    "data": DataConfig,
    "tokenizer": TokenizerConfig,
    "losses": LossWeights,
    "trainer": TrainerConfig,
    "ar": ARConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{section}.{key}'")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section '{section}': {exc}") from None


def parse_config(doc: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    sections = {name: _build_section(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**sections)

    if cfg.data.dir is not None:
        cfg.data.dir = os.path.normpath(os.path.join(base_dir, cfg.data.dir))
    if cfg.data.image_size != cfg.tokenizer.image_size:
        raise ConfigError(f"data.image_size {cfg.data.image_size} != tokenizer.image_size "
                          f"{cfg.tokenizer.image_size}")
    if not (1 <= cfg.trainer.l_min <= cfg.trainer.l_max <= cfg.tokenizer.latent_len):
        raise ConfigError(f"need 1 <= trainer.l_min <= trainer.l_max <= tokenizer.latent_len, got "
                          f"{cfg.trainer.l_min}, {cfg.trainer.l_max}, {cfg.tokenizer.latent_len}")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))


def default_config() -> RunConfig:
    return parse_config({})
